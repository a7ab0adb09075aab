// Browser entry point.  The service origin comes from the ?api= query
// parameter; without it the page talks to its own origin.

import { SessionApi } from "./api.js";
import { bootstrap } from "./ui.js";

const params = new URLSearchParams(window.location.search);
bootstrap(document, new SessionApi(params.get("api") ?? ""));
