import { ConsoleApi } from "./api.js";
import { ConsoleView } from "./dom.js";
import { ConsoleState } from "./state.js";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("server") ?? "http://127.0.0.1:8080";

const api = new ConsoleApi(baseUrl);
const state = new ConsoleState(api);
const root = document.getElementById("app");
if (!root) throw new Error("missing #app container");
const view = new ConsoleView(root, state);

state.subscribe((snap) => view.render(snap));
void state.loadPatients();
