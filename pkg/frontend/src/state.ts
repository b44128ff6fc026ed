/**
 * Panel view state and control gating.
 *
 * The panel holds no authoritative state: everything below is derived
 * from API responses, and a control is enabled if and only if the last
 * status snapshot says the daemon would accept that action. There are
 * no optimistic transitions anywhere.
 */

export interface StreamHealth {
  streamId: number;
  kind: string;
  label: string;
  status: string; // present | absent | error
  chunks: number;
}

export interface PeerHealth {
  peerId: string;
  role: string;
  lost: boolean;
  syncAgeS: number | null;
}

export interface PanelViewState {
  connected: boolean;
  busy: boolean;
  deviceId: string | null;
  role: string | null;
  sessionState: string | null; // daemon's word, verbatim
  sessionId: string | null;
  consentParticipant: boolean;
  consentWitness: boolean;
  mediaChunks: number;
  streams: StreamHealth[];
  peers: PeerHealth[];
  errorBanner: string | null;
  lastPollAt: number | null;
}

export function initialViewState(): PanelViewState {
  return {
    connected: false,
    busy: false,
    deviceId: null,
    role: null,
    sessionState: null,
    sessionId: null,
    consentParticipant: false,
    consentWitness: false,
    mediaChunks: 0,
    streams: [],
    peers: [],
    errorBanner: null,
    lastPollAt: null,
  };
}

/** Fold one /v1/status payload into the view state. */
export function applyStatus(view: PanelViewState, status: any, now: number): PanelViewState {
  const session = status.session ?? null;
  return {
    ...view,
    connected: true,
    deviceId: status.device_id ?? null,
    role: status.role ?? null,
    sessionState: session ? session.state : status.state ?? null,
    sessionId: session ? session.session_id : null,
    consentParticipant: Boolean(session?.consent?.participant),
    consentWitness: Boolean(session?.consent?.witness),
    mediaChunks: session ? session.media_chunks ?? 0 : 0,
    streams: (status.streams ?? []).map((s: any) => ({
      streamId: s.stream_id,
      kind: s.kind,
      label: s.label ?? "",
      status: s.status ?? "unknown",
      chunks: s.chunks ?? 0,
    })),
    peers: (status.peers ?? []).map((p: any) => ({
      peerId: p.peer_id,
      role: p.role ?? "",
      lost: Boolean(p.lost),
      syncAgeS: p.sync_age_s ?? null,
    })),
    lastPollAt: now,
  };
}

export interface Controls {
  newSession: boolean;
  consentParticipant: boolean;
  consentWitness: boolean;
  start: boolean;
  pause: boolean;
  resume: boolean;
  stop: boolean;
  retry: boolean;
}

export function controlsFor(view: PanelViewState): Controls {
  if (!view.connected || view.busy) {
    return {
      newSession: false,
      consentParticipant: false,
      consentWitness: false,
      start: false,
      pause: false,
      resume: false,
      stop: false,
      retry: !view.busy, // network loss leaves exactly one way out
    };
  }
  const s = view.sessionState;
  return {
    newSession: s === null || s === "Stopped",
    consentParticipant: s === "Idle" || s === "ConsentPending",
    // The witness checkbox unlocks only once the API has acknowledged
    // the participant's consent; the panel never infers it.
    consentWitness: s === "ConsentPending" && view.consentParticipant,
    start: s === "Ready",
    pause: s === "Recording",
    resume: s === "Paused",
    stop: s === "Recording" || s === "Paused",
    retry: false,
  };
}
