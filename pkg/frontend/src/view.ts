/**
 * DOM rendering. The layout favors the humans in the room: the witness
 * pause control is the largest element on screen while recording, and
 * pause/stop never ask for a reason.
 */

import { Actor, LifecycleAction, PanelController } from "./controller.js";
import { Controls, PanelViewState } from "./state.js";

const STATE_CLASSES: Record<string, string> = {
  Idle: "chip-idle",
  ConsentPending: "chip-consent",
  Ready: "chip-ready",
  Recording: "chip-recording",
  Paused: "chip-paused",
  Stopped: "chip-stopped",
};

export class PanelView {
  private root: HTMLElement;

  constructor(root: HTMLElement, private readonly controller: PanelController) {
    this.root = root;
  }

  render(view: PanelViewState, controls: Controls): void {
    this.root.innerHTML = "";
    this.root.appendChild(this.header(view));
    if (view.errorBanner) {
      this.root.appendChild(this.banner(view.errorBanner, controls));
    }
    this.root.appendChild(this.consentCard(view, controls));
    this.root.appendChild(this.controlCard(view, controls));
    this.root.appendChild(this.healthCard(view));
  }

  private el(tag: string, className: string, text?: string): HTMLElement {
    const node = document.createElement(tag);
    node.className = className;
    if (text !== undefined) {
      node.textContent = text;
    }
    return node;
  }

  private header(view: PanelViewState): HTMLElement {
    const head = this.el("header", "header");
    head.appendChild(this.el("h1", "", "Recording session"));
    const chip = this.el(
      "span",
      `chip ${STATE_CLASSES[view.sessionState ?? ""] ?? "chip-idle"}`,
      view.sessionState ?? (view.connected ? "no session" : "offline"),
    );
    chip.id = "state-chip";
    head.appendChild(chip);
    const device = this.el(
      "span",
      "sub",
      view.deviceId ? `${view.deviceId} (${view.role})` : "",
    );
    head.appendChild(device);
    return head;
  }

  private banner(text: string, controls: Controls): HTMLElement {
    const div = this.el("div", "banner", text);
    div.id = "error-banner";
    if (controls.retry) {
      const retry = this.el("button", "btn", "retry");
      retry.onclick = () => void this.controller.pollOnce();
      div.appendChild(retry);
    }
    return div;
  }

  private consentCard(view: PanelViewState, controls: Controls): HTMLElement {
    const card = this.el("section", "card");
    card.appendChild(this.el("h2", "", "Consent"));

    const newBtn = this.el("button", "btn", "new session") as HTMLButtonElement;
    newBtn.id = "btn-new-session";
    newBtn.disabled = !controls.newSession;
    newBtn.onclick = () => void this.controller.newSession();
    card.appendChild(newBtn);

    const pRow = this.el("div", "row");
    const pCode = this.el("input", "") as HTMLInputElement;
    pCode.id = "participant-code";
    pCode.placeholder = "participant code";
    pCode.disabled = !controls.consentParticipant;
    const pBtn = this.el("button", "btn", "participant consented") as HTMLButtonElement;
    pBtn.id = "btn-consent-participant";
    pBtn.disabled = !controls.consentParticipant;
    pBtn.onclick = () =>
      void this.controller.consentParticipant(pCode.value || "P00", "PIS");
    pRow.append(pCode, pBtn, this.el("span", "tick", view.consentParticipant ? "OK" : ""));
    card.appendChild(pRow);

    const wRow = this.el("div", "row");
    const wCode = this.el("input", "") as HTMLInputElement;
    wCode.id = "witness-code";
    wCode.placeholder = "witness code";
    wCode.disabled = !controls.consentWitness;
    const flags: HTMLInputElement[] = [];
    for (const [key, label] of [
      ["understood_pis", "understood info sheet"],
      ["questions_answered", "questions answered"],
      ["no_deception", "no deception"],
    ]) {
      const wrap = this.el("label", "flag");
      const box = this.el("input", "") as HTMLInputElement;
      box.type = "checkbox";
      box.disabled = !controls.consentWitness;
      box.dataset.flag = key;
      flags.push(box);
      wrap.prepend(box);
      wrap.append(label);
      wRow.appendChild(wrap);
    }
    const wBtn = this.el("button", "btn", "witness countersigned") as HTMLButtonElement;
    wBtn.id = "btn-consent-witness";
    wBtn.disabled = !controls.consentWitness;
    wBtn.onclick = () =>
      void this.controller.consentWitness(wCode.value || "W00", {
        understood_pis: flags[0].checked,
        questions_answered: flags[1].checked,
        no_deception: flags[2].checked,
      });
    wRow.prepend(wCode);
    wRow.appendChild(wBtn);
    wRow.appendChild(this.el("span", "tick", view.consentWitness ? "OK" : ""));
    card.appendChild(wRow);
    return card;
  }

  private bigButton(
    id: string,
    label: string,
    className: string,
    enabled: boolean,
    action: LifecycleAction,
    actor: Actor,
  ): HTMLButtonElement {
    const btn = this.el("button", className, label) as HTMLButtonElement;
    btn.id = id;
    btn.disabled = !enabled;
    btn.onclick = () => void this.controller.lifecycle(action, actor);
    return btn;
  }

  private controlCard(view: PanelViewState, controls: Controls): HTMLElement {
    const card = this.el("section", "card");
    card.appendChild(this.el("h2", "", "Controls"));
    card.appendChild(
      this.bigButton("btn-start", "START", "btn big", controls.start, "start", "researcher"),
    );
    // The witness's pause is the visually primary control.
    card.appendChild(
      this.bigButton("btn-witness-pause", "WITNESS: PAUSE", "btn huge warn",
                     controls.pause, "pause", "witness"),
    );
    card.appendChild(
      this.bigButton("btn-witness-stop", "WITNESS: STOP", "btn big danger",
                     controls.stop, "stop", "witness"),
    );
    const row = this.el("div", "row");
    row.append(
      this.bigButton("btn-pause", "pause", "btn", controls.pause, "pause", "researcher"),
      this.bigButton("btn-resume", "resume", "btn", controls.resume, "resume", "researcher"),
      this.bigButton("btn-stop", "stop", "btn", controls.stop, "stop", "researcher"),
    );
    card.appendChild(row);
    return card;
  }

  private healthCard(view: PanelViewState): HTMLElement {
    const card = this.el("section", "card");
    card.appendChild(this.el("h2", "", "Streams & peers"));
    const list = this.el("ul", "lights");
    for (const s of view.streams) {
      const item = this.el("li", "");
      item.appendChild(this.el("span", `light light-${s.status}`, ""));
      item.appendChild(
        this.el("span", "", ` ${s.label || s.kind} #${s.streamId}: ${s.status}, ${s.chunks} chunks`),
      );
      list.appendChild(item);
    }
    for (const p of view.peers) {
      const item = this.el("li", "");
      const state = p.lost ? "lost" : "linked";
      const sync = p.syncAgeS === null ? "never synced" : `synced ${p.syncAgeS.toFixed(1)}s ago`;
      item.appendChild(this.el("span", `light light-${p.lost ? "absent" : "present"}`, ""));
      item.appendChild(this.el("span", "", ` peer ${p.peerId}: ${state}, ${sync}`));
      list.appendChild(item);
    }
    card.appendChild(list);
    return card;
  }
}
