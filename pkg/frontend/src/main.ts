import { ApiClient } from "./api";
import { App } from "./app";
import "./style.css";

const root = document.getElementById("app");
if (!root) throw new Error("missing #app mount point");

const params = new URLSearchParams(window.location.search);
const app = new App(root, new ApiClient(""), "");
app.init(params.get("sample_id") ?? undefined).catch((err) => {
  root.textContent = `failed to start: ${err instanceof Error ? err.message : err}`;
});
