/**
 * Panel controller: a single event loop around the API client.
 *
 * Status is polled at 1 Hz with at most one poll in flight. User
 * actions are queued and run strictly one at a time; each action waits
 * for its confirmation response and then for a fresh status poll, so
 * the screen only ever shows states the daemon reported. A 409 from
 * the daemon surfaces its "error" field verbatim in the banner.
 */

import { ApiClient, ApiResult } from "./api.js";
import {
  Controls,
  PanelViewState,
  applyStatus,
  controlsFor,
  initialViewState,
} from "./state.js";

export type Actor = "researcher" | "witness";
export type LifecycleAction = "start" | "pause" | "resume" | "stop";

export type RenderFn = (view: PanelViewState, controls: Controls) => void;

const NETWORK_BANNER = "daemon unreachable - check the link, then retry";

export class PanelController {
  view: PanelViewState = initialViewState();
  private queue: Promise<void> = Promise.resolve();
  private pollInFlight = false;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly api: ApiClient,
    private readonly render: RenderFn,
    private readonly now: () => number = () => Date.now(),
  ) {}

  private publish(): void {
    this.render(this.view, controlsFor(this.view));
  }

  startPolling(intervalMs = 1000): void {
    this.stopPolling();
    void this.pollOnce();
    this.timer = setInterval(() => void this.pollOnce(), intervalMs);
  }

  stopPolling(): void {
    if (this.timer !== null) {
      clearInterval(this.timer);
      this.timer = null;
    }
  }

  /** One status fetch; concurrent calls collapse into the in-flight one. */
  async pollOnce(): Promise<void> {
    if (this.pollInFlight) {
      return;
    }
    this.pollInFlight = true;
    try {
      const result = await this.api.get("/status");
      if (result.networkError) {
        this.view = { ...this.view, connected: false, errorBanner: NETWORK_BANNER };
      } else if (result.ok) {
        this.view = applyStatus(this.view, result.body, this.now());
        if (this.view.errorBanner === NETWORK_BANNER) {
          this.view = { ...this.view, errorBanner: null };
        }
      } else {
        this.view = {
          ...this.view,
          connected: true,
          errorBanner: bannerFrom(result),
        };
      }
    } finally {
      this.pollInFlight = false;
      this.publish();
    }
  }

  private enqueue(run: () => Promise<void>): Promise<void> {
    this.queue = this.queue.then(run, run);
    return this.queue;
  }

  private action(path: string, body?: object): Promise<void> {
    return this.enqueue(async () => {
      this.view = { ...this.view, busy: true };
      this.publish();
      const result = await this.api.post(path, body);
      if (result.networkError) {
        this.view = { ...this.view, busy: false, connected: false, errorBanner: NETWORK_BANNER };
        this.publish();
        return;
      }
      this.view = {
        ...this.view,
        errorBanner: result.ok ? null : bannerFrom(result),
      };
      // Confirmation received; reflect whatever state the daemon now
      // reports rather than assuming the action's effect.
      this.pollInFlight = false;
      await this.pollOnce();
      this.view = { ...this.view, busy: false };
      this.publish();
    });
  }

  newSession(): Promise<void> {
    return this.action("/session");
  }

  consentParticipant(participantCode: string, pisVersion: string): Promise<void> {
    return this.action("/session/consent", {
      role: "participant",
      participant_code: participantCode,
      pis_version: pisVersion,
    });
  }

  consentWitness(
    witnessCode: string,
    attests: { understood_pis: boolean; questions_answered: boolean; no_deception: boolean },
  ): Promise<void> {
    return this.action("/session/consent", {
      role: "witness",
      witness_code: witnessCode,
      attests,
    });
  }

  lifecycle(action: LifecycleAction, actor: Actor): Promise<void> {
    // No reason field exists on purpose: pausing or stopping never
    // requires a justification.
    return this.action(`/session/${action}`, { actor });
  }
}

function bannerFrom(result: ApiResult): string {
  if (result.body && typeof result.body.error === "string") {
    return result.body.error; // the API's own word, verbatim
  }
  return `request failed (${result.status})`;
}
