/**
 * Evaluator console: start a session, chat and label each tutor turn inline,
 * export, and read the metrics grid. Views render exclusively from server
 * responses; a 1s poll keeps the transcript in sync while a reply is pending.
 */

import { ApiClient, ApiError, type Catalog, type SessionView } from "./api.js";
import { metricsTable } from "./format.js";
import {
  LABEL_TITLES,
  STAGE_LABELS,
  type StageLabel,
  canSend,
  exportReadiness,
  labelBadge,
  isTutorTurn,
  withLabel,
} from "./state.js";

const POLL_INTERVAL_MS = 1000;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  ...children: (Node | string)[]
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    if (key === "class") node.className = value;
    else node.setAttribute(key, value);
  }
  node.append(...children);
  return node;
}

function banner(message: string): HTMLElement {
  return el("div", { class: "banner error" }, message);
}

export class App {
  private root: HTMLElement;
  private api: ApiClient;
  private pollTimer: number | null = null;
  private sending = false;

  constructor(root: HTMLElement, api: ApiClient = new ApiClient()) {
    this.root = root;
    this.api = api;
    window.addEventListener("hashchange", () => void this.route());
  }

  start(): void {
    void this.route();
  }

  private stopPolling(): void {
    if (this.pollTimer !== null) {
      window.clearInterval(this.pollTimer);
      this.pollTimer = null;
    }
  }

  private async route(): Promise<void> {
    this.stopPolling();
    this.sending = false;
    const hash = window.location.hash || "#/";
    try {
      if (hash.startsWith("#/session/")) {
        await this.renderChat(hash.slice("#/session/".length));
      } else if (hash === "#/metrics") {
        await this.renderMetrics();
      } else {
        await this.renderStart();
      }
    } catch (error) {
      this.root.replaceChildren(this.nav(), banner(describe(error)));
    }
  }

  private nav(): HTMLElement {
    return el(
      "nav",
      {},
      el("a", { href: "#/" }, "New session"),
      el("a", { href: "#/metrics" }, "Metrics"),
    );
  }

  // ----- start form -----

  private async renderStart(): Promise<void> {
    const catalog = await this.api.getCatalog();
    const sessions = await this.api.listSessions();

    const endpointSelect = selectOf("endpoint", catalog.endpoints);
    const modelInput = el("input", {
      id: "model_tag",
      value: catalog.endpoints[0] ?? "",
      title: "Free-text tag used to group this session in reports",
    });
    endpointSelect.addEventListener("change", () => {
      modelInput.value = endpointSelect.value;
    });
    const domainSelect = selectOf("domain", catalog.domains, "choose a domain");
    const problemSelect = selectOf(
      "problem",
      catalog.problems.map((p) => p.id),
      undefined,
      catalog.problems.map((p) => `${p.id}: ${p.question.slice(0, 80)}`),
    );
    const personaSelect = selectOf(
      "persona",
      ["", ...catalog.personas.map((p) => p.id)],
      undefined,
      ["(none)", ...catalog.personas.map((p) => `${p.id}: ${p.background.slice(0, 60)}`)],
    );

    const submit = el("button", { id: "create" }, "Start session") as HTMLButtonElement;
    const errorSlot = el("div", {});
    const syncSubmit = () => {
      submit.disabled = domainSelect.value === "";
    };
    domainSelect.addEventListener("change", syncSubmit);
    syncSubmit();

    submit.addEventListener("click", () => {
      void (async () => {
        try {
          const { id } = await this.api.createSession({
            model_tag: modelInput.value,
            endpoint: endpointSelect.value,
            problem_id: problemSelect.value,
            domain: domainSelect.value,
            persona_id: personaSelect.value || null,
          });
          window.location.hash = `#/session/${id}`;
        } catch (error) {
          errorSlot.replaceChildren(banner(describe(error)));
        }
      })();
    });

    const resume = el("ul", { class: "sessions" });
    for (const session of sessions) {
      resume.append(
        el(
          "li",
          {},
          el("a", { href: `#/session/${session.id}` }, session.id),
          ` ${session.model_tag} / ${session.domain} - ${session.n_turns} turns` +
            `${session.closed ? " (closed)" : ""}`,
        ),
      );
    }

    this.root.replaceChildren(
      this.nav(),
      el("h1", {}, "Start a tutoring session"),
      formRow("Endpoint", endpointSelect),
      formRow("Model tag", modelInput),
      formRow("Domain", domainSelect),
      formRow("Problem", problemSelect),
      formRow("Persona", personaSelect),
      submit,
      errorSlot,
      el("h2", {}, "Existing sessions"),
      resume,
    );
  }

  // ----- chat view -----

  private async renderChat(sessionId: string): Promise<void> {
    const view = await this.api.getSession(sessionId);
    this.paintChat(view);
    this.pollTimer = window.setInterval(() => {
      void this.refreshChat(sessionId);
    }, POLL_INTERVAL_MS);
  }

  private async refreshChat(sessionId: string): Promise<void> {
    if (this.sending) return;
    try {
      this.paintChat(await this.api.getSession(sessionId));
    } catch {
      // transient polling failure: keep the current view
    }
  }

  private paintChat(view: SessionView): void {
    const transcript = el("ol", { class: "transcript", id: "transcript" });
    for (const turn of view.turns) {
      const item = el(
        "li",
        { class: `turn ${turn.from}`, "data-index": String(turn.index) },
        el("span", { class: "speaker" }, turn.from === "gpt" ? "tutor" : "student"),
        el("p", {}, turn.value),
      );
      if (isTutorTurn(turn)) {
        const badge = el("span", { class: "badge", "data-badge": String(turn.index) }, labelBadge(turn));
        const buttons = el("span", { class: "labels" });
        for (const label of STAGE_LABELS) {
          const button = el(
            "button",
            { class: "label", title: LABEL_TITLES[label] },
            label,
          ) as HTMLButtonElement;
          button.addEventListener("click", () => {
            void (async () => {
              await this.api.labelTurn(view.id, turn.index, label);
              this.paintChat(withLabel(view, turn.index, label as StageLabel));
            })();
          });
          buttons.append(button);
        }
        item.append(badge, buttons);
      }
      transcript.append(item);
    }

    const input = el("textarea", { id: "student-input", rows: "2" }) as HTMLTextAreaElement;
    const send = el("button", { id: "send" }, "Send") as HTMLButtonElement;
    const errorSlot = el("div", {});
    send.disabled = !canSend(view, this.sending);
    input.disabled = send.disabled;

    send.addEventListener("click", () => {
      const text = input.value.trim();
      if (!text) return;
      this.sending = true;
      send.disabled = true;
      input.disabled = true;
      void (async () => {
        try {
          await this.api.sendMessage(view.id, text);
          this.sending = false;
          this.paintChat(await this.api.getSession(view.id));
        } catch (error) {
          this.sending = false;
          errorSlot.replaceChildren(banner(describe(error)));
          send.disabled = !canSend(view, false);
          input.disabled = send.disabled;
        }
      })();
    });

    const readiness = exportReadiness(view);
    const exportButton = el(
      "button",
      { id: "export", title: readiness.reason ?? "download the annotated record" },
      "Export",
    ) as HTMLButtonElement;
    exportButton.disabled = !readiness.ready;
    exportButton.addEventListener("click", () => {
      void (async () => {
        try {
          if (!view.closed) await this.api.closeSession(view.id);
          const record = await this.api.exportSession(view.id);
          download(`${view.id}.json`, JSON.stringify(record));
          this.paintChat(await this.api.getSession(view.id));
        } catch (error) {
          errorSlot.replaceChildren(banner(describe(error)));
        }
      })();
    });

    const personaCard = view.persona
      ? el(
          "aside",
          { class: "persona" },
          el("h3", {}, `Persona: ${view.persona.id}`),
          el("p", {}, view.persona.background),
          el("p", {}, `Strengths: ${view.persona.strengths}`),
          el("p", {}, `Challenges: ${view.persona.challenges}`),
        )
      : el("aside", { class: "persona" });

    this.root.replaceChildren(
      this.nav(),
      el("h1", {}, `Session ${view.id}`),
      el(
        "p",
        { class: "meta" },
        `${view.model_tag} via ${view.endpoint} - ${view.domain}` +
          `${view.closed ? " - closed" : view.pending ? " - waiting for reply" : ""}`,
      ),
      el("section", { class: "problem" }, el("h3", {}, "Problem"), el("p", {}, view.problem.question)),
      personaCard,
      transcript,
      el("div", { class: "composer" }, input, send, exportButton),
      errorSlot,
    );
  }

  // ----- metrics panel -----

  private async renderMetrics(): Promise<void> {
    const { rows, n_sessions } = await this.api.getMetrics();
    const table = el("table", { id: "metrics" });
    const [header = [], ...body] = metricsTable(rows);
    table.append(
      el("thead", {}, el("tr", {}, ...header.map((cell) => el("th", {}, cell)))),
      el(
        "tbody",
        {},
        ...body.map((cells) => el("tr", {}, ...cells.map((cell) => el("td", {}, cell)))),
      ),
    );
    this.root.replaceChildren(
      this.nav(),
      el("h1", {}, "Stage metrics"),
      el("p", {}, `${n_sessions} exported session(s). The server computes every number.`),
      rows.length ? table : el("p", {}, "No exported sessions yet."),
    );
  }
}

function formRow(label: string, control: HTMLElement): HTMLElement {
  return el("div", { class: "row" }, el("label", {}, label), control);
}

function selectOf(
  id: string,
  values: string[],
  placeholder?: string,
  titles?: string[],
): HTMLSelectElement {
  const select = el("select", { id }) as HTMLSelectElement;
  if (placeholder !== undefined) {
    select.append(el("option", { value: "" }, placeholder));
  }
  values.forEach((value, i) => {
    select.append(el("option", { value }, titles?.[i] ?? value));
  });
  return select;
}

function download(filename: string, content: string): void {
  const link = el("a", {
    href: `data:application/json;charset=utf-8,${encodeURIComponent(content)}`,
    download: filename,
  });
  link.click();
}

function describe(error: unknown): string {
  if (error instanceof ApiError) return `server error (${error.status}): ${error.message}`;
  return error instanceof Error ? error.message : String(error);
}
