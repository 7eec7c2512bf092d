import { ApiClient } from "./api.js";
import { App } from "./app.js";

const root = document.getElementById("app");
if (root === null) {
  throw new Error("missing #app mount point");
}
// served by the backend under /ui, so the API lives at the origin root
new App(root, new ApiClient("")).start();
