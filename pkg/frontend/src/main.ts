/** Browser bootstrap: wires the app to a service base URL and reviewer id.
 *
 * Both come from query parameters so the page itself stays static:
 *   index.html?base=http://127.0.0.1:8000&reviewer=alice
 */

import { ReviewApi } from "./api.js";
import { ReviewApp } from "./app.js";

const params = new URLSearchParams(window.location.search);
const base = params.get("base") ?? window.location.origin;
const reviewer = params.get("reviewer") ?? "anonymous";

const root = document.getElementById("app");
if (root === null) {
  throw new Error("page is missing the #app mount point");
}

const app = new ReviewApp(root, new ReviewApi(base, reviewer));
void app.start();
