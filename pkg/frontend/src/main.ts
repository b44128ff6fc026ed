import { ApiClient } from "./api.js";
import { PanelController } from "./controller.js";
import { PanelView } from "./view.js";

function token(): string {
  let value = sessionStorage.getItem("cusco_token");
  if (!value) {
    value = window.prompt("API token") ?? "";
    sessionStorage.setItem("cusco_token", value);
  }
  return value;
}

function boot(): void {
  const root = document.getElementById("app");
  if (!root) {
    throw new Error("missing #app mount point");
  }
  // Served by the daemon itself, so the API lives at the same origin.
  const api = new ApiClient(window.location.origin, token());
  const controller = new PanelController(api, (view, controls) =>
    panelView.render(view, controls),
  );
  const panelView = new PanelView(root, controller);
  controller.startPolling(1000);
}

boot();
