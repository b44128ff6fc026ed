/**
 * Live-daemon integration: runs only when CUSCO_PANEL_API (and
 * CUSCO_PANEL_TOKEN) point at a running recorder, e.g. via
 * scripts/run-integration.sh. Exercises the panel controller against
 * the real HTTP API end to end.
 */

import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { PanelController } from "../src/controller.js";
import { controlsFor } from "../src/state.js";

const BASE = process.env.CUSCO_PANEL_API;
const TOKEN = process.env.CUSCO_PANEL_TOKEN ?? "";

const liveIt = BASE ? it : it.skip;

interface Recorded {
  url: string;
  body: string | null;
}

function instrumentedClient(requests: Recorded[]): ApiClient {
  const recordingFetch = (url: string, init?: RequestInit) => {
    requests.push({ url, body: (init?.body as string) ?? null });
    return fetch(url, init);
  };
  return new ApiClient(BASE!, TOKEN, recordingFetch);
}

describe("panel against a live daemon", () => {
  liveIt(
    "gates witness consent, reflects pause within one poll cycle, surfaces 409s",
    async () => {
      const requests: Recorded[] = [];
      const controller = new PanelController(instrumentedClient(requests), () => {});

      await controller.pollOnce();
      expect(controller.view.connected).toBe(true);

      await controller.newSession();
      expect(controller.view.errorBanner).toBeNull();

      // Pre-participant-consent: witness controls must be disabled and a
      // premature start must surface the daemon's machine-readable error.
      expect(controlsFor(controller.view).consentWitness).toBe(false);
      await controller.lifecycle("start", "researcher");
      expect(controller.view.errorBanner).toBe("consent_incomplete");

      await controller.consentParticipant("P-int", "PIS-1");
      expect(controller.view.sessionState).toBe("ConsentPending");
      expect(controlsFor(controller.view).consentWitness).toBe(true);

      await controller.consentWitness("W-int", {
        understood_pis: true,
        questions_answered: true,
        no_deception: true,
      });
      expect(controller.view.sessionState).toBe("Ready");

      await controller.lifecycle("start", "researcher");
      await waitForState(controller, "Recording", 5000);

      // Pause must be visible within one poll cycle (1 Hz + margin).
      const clicked = Date.now();
      await controller.lifecycle("pause", "witness");
      await waitForState(controller, "Paused", 1500);
      expect(Date.now() - clicked).toBeLessThanOrEqual(1500);

      await controller.lifecycle("stop", "witness");
      await waitForState(controller, "Stopped", 5000);

      // The panel never requested media or keys from the daemon.
      for (const req of requests) {
        expect(req.url).not.toMatch(/key|media|chunk/);
        if (req.body) {
          expect(req.body).not.toMatch(/key|payload|media/);
          expect(req.body.length).toBeLessThan(500);
        }
      }
    },
    30000,
  );
});

async function waitForState(
  controller: PanelController,
  want: string,
  budgetMs: number,
): Promise<void> {
  const deadline = Date.now() + budgetMs;
  while (Date.now() < deadline) {
    if (controller.view.sessionState === want) {
      return;
    }
    await new Promise((resolve) => setTimeout(resolve, 150));
    await controller.pollOnce();
  }
  expect(controller.view.sessionState).toBe(want);
}
