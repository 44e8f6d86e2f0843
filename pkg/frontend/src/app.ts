/** Single-page review app: fetch a leased record, render it, submit verdicts.
 *
 * One verdict is in flight at a time; the queue lease lives server-side. All
 * state shown on screen is rebuilt from the last API payload, so nothing the
 * UI displays can drift from the record store.
 */

import {
  ConflictError,
  ReviewApi,
  ReviewCard,
  ReviewEdits,
  Verdict,
} from "./api.js";

export type ReviewServiceLike = Pick<
  ReviewApi,
  "fetchNext" | "fetchRecord" | "submitVerdict"
>;

interface ConflictState {
  message: string;
  clipId: string;
}

function el<K extends keyof HTMLElementTagNameMap>(
  document: Document,
  tag: K,
  attrs: Record<string, string> = {},
  children: (Node | string)[] = [],
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [key, value] of Object.entries(attrs)) {
    node.setAttribute(key, value);
  }
  for (const child of children) {
    node.append(child);
  }
  return node;
}

const HOTKEYS: Record<string, Verdict> = { a: "APPROVE", r: "REJECT" };

export class ReviewApp {
  private readonly root: HTMLElement;
  private readonly api: ReviewServiceLike;
  private readonly document: Document;

  card: ReviewCard | null = null;
  private editing = false;
  private editLabels: string[] = [];
  private editReason = "";
  private editIntensity = "";
  private queueEmpty = false;
  private conflict: ConflictState | null = null;
  private errorMessage: string | null = null;
  private validationMessage: string | null = null;

  private pending: Promise<void> | null = null;
  private lastAction: (() => Promise<void>) | null = null;
  private readonly keyListener: (event: KeyboardEvent) => void;

  constructor(root: HTMLElement, api: ReviewServiceLike) {
    this.root = root;
    this.api = api;
    this.document = root.ownerDocument;
    this.keyListener = (event) => this.onKey(event);
    this.document.addEventListener("keydown", this.keyListener);
  }

  destroy(): void {
    this.document.removeEventListener("keydown", this.keyListener);
  }

  /** Resolves when the currently running operation (if any) finishes. */
  async settle(): Promise<void> {
    while (this.pending !== null) {
      await this.pending;
    }
  }

  start(): Promise<void> {
    return this.run(() => this.loadNext());
  }

  // --- operations --------------------------------------------------------------

  private run(action: () => Promise<void>): Promise<void> {
    if (this.pending !== null) {
      return this.pending; // one in-flight operation at a time
    }
    this.lastAction = action;
    this.pending = (async () => {
      try {
        this.errorMessage = null;
        await action();
      } catch (error) {
        if (error instanceof ConflictError && this.card !== null) {
          this.conflict = { message: error.message, clipId: this.card.clip_id };
        } else {
          this.errorMessage = error instanceof Error ? error.message : String(error);
        }
      } finally {
        this.pending = null;
        this.render();
      }
    })();
    return this.pending;
  }

  private async loadNext(): Promise<void> {
    const card = await this.api.fetchNext();
    this.card = card;
    this.queueEmpty = card === null;
    this.editing = false;
    this.conflict = null;
    this.validationMessage = null;
  }

  private async submit(verdict: Verdict, edits?: ReviewEdits): Promise<void> {
    if (this.card === null) {
      return;
    }
    await this.api.submitVerdict(this.card.clip_id, verdict, this.card.record_version, edits);
    await this.loadNext();
  }

  private submitSimple(verdict: Verdict): void {
    if (this.card === null || this.editing || this.pending !== null) {
      return;
    }
    void this.run(() => this.submit(verdict));
  }

  private saveEdit(): void {
    if (this.card === null || this.pending !== null) {
      return;
    }
    const reason = this.editReason.trim();
    if (reason === "") {
      this.validationMessage = "an edited record needs a non-empty reason";
      this.render();
      return;
    }
    if (this.editLabels.length === 0) {
      this.validationMessage = "an edited record needs at least one label";
      this.render();
      return;
    }
    const edits: ReviewEdits = { reason, labels: [...this.editLabels] };
    const intensity = Number(this.editIntensity);
    if (this.editIntensity !== "" && Number.isFinite(intensity)) {
      edits.intensity = intensity;
    }
    this.validationMessage = null;
    void this.run(() => this.submit("EDIT", edits));
  }

  private reloadAfterConflict(): void {
    const clipId = this.conflict?.clipId;
    if (clipId === undefined) {
      return;
    }
    void this.run(async () => {
      this.card = await this.api.fetchRecord(clipId);
      this.conflict = null;
      this.editing = false;
    });
  }

  private onKey(event: KeyboardEvent): void {
    const target = event.target as HTMLElement | null;
    const tag = target?.tagName?.toLowerCase();
    if (tag === "input" || tag === "textarea") {
      return;
    }
    if (this.conflict !== null) {
      return;
    }
    const verdict = HOTKEYS[event.key];
    if (verdict !== undefined) {
      this.submitSimple(verdict);
    } else if (event.key === "e" && this.card !== null && !this.editing) {
      this.enterEditMode(this.card);
    }
  }

  private enterEditMode(card: ReviewCard): void {
    this.editing = true;
    this.editLabels = [...card.open_vocab_labels];
    this.editReason = card.reason;
    this.editIntensity = String(card.intensity);
    this.validationMessage = null;
    this.render();
  }

  // --- rendering -----------------------------------------------------------------

  render(): void {
    const d = this.document;
    this.root.replaceChildren();

    if (this.errorMessage !== null) {
      const retry = el(d, "button", { id: "retry-btn", type: "button" }, ["Retry"]);
      retry.addEventListener("click", () => {
        const action = this.lastAction;
        if (action !== null) {
          void this.run(action);
        }
      });
      this.root.append(
        el(d, "div", { id: "status-banner", role: "alert" }, [
          el(d, "span", {}, [`request failed: ${this.errorMessage}`]),
          retry,
        ]),
      );
      // the current card stays rendered below the banner: no state loss
    }

    if (this.conflict !== null) {
      const reload = el(d, "button", { id: "conflict-reload", type: "button" }, [
        "Reload record",
      ]);
      reload.addEventListener("click", () => this.reloadAfterConflict());
      this.root.append(
        el(d, "div", { id: "conflict-dialog", role: "alertdialog" }, [
          el(d, "p", {}, [
            "Someone else reviewed this record first. Reload it to see the " +
              "current state; your verdict was not applied.",
          ]),
          el(d, "p", { class: "conflict-detail" }, [this.conflict.message]),
          reload,
        ]),
      );
      return;
    }

    if (this.queueEmpty) {
      this.root.append(
        el(d, "div", { id: "empty-state" }, [
          el(d, "p", {}, ["Queue drained - no records awaiting review."]),
        ]),
      );
      return;
    }

    if (this.card === null) {
      this.root.append(el(d, "p", { id: "loading" }, ["Loading..."]));
      return;
    }
    this.root.append(this.renderCard(this.card));
  }

  private renderCard(card: ReviewCard): HTMLElement {
    const d = this.document;
    const busy = this.pending !== null;

    const header = el(d, "header", {}, [
      el(d, "h2", { id: "clip-id" }, [card.clip_id]),
      el(d, "span", { id: "source" }, [card.source_dataset]),
      el(d, "span", { id: "status" }, [card.review_status]),
      el(d, "span", { id: "score", title: "self-review score, guidance only" }, [
        `score ${card.alignment_score ?? "-"} / intensity ${card.intensity}`,
      ]),
    ]);

    const media = el(d, "section", { id: "media" }, [
      el(d, "video", { id: "media-video", controls: "", src: card.video_url }),
      el(d, "audio", { id: "media-audio", controls: "", src: card.audio_url }),
    ]);

    const byKind = new Map<string, string[]>();
    for (const item of card.evidence) {
      const bucket = byKind.get(item.kind) ?? [];
      bucket.push(item.text);
      byKind.set(item.kind, bucket);
    }
    const evidence = el(d, "section", { id: "evidence" });
    for (const [kind, texts] of byKind) {
      evidence.append(
        el(d, "div", { class: "evidence-group", "data-kind": kind }, [
          el(d, "h3", {}, [kind]),
          el(d, "ul", {}, texts.map((text) => el(d, "li", {}, [text]))),
        ]),
      );
    }

    const body = this.editing ? this.renderEditForm() : this.renderReadView(card);

    const audit = el(d, "section", { id: "audit" });
    if (card.audit.length > 0) {
      audit.append(
        el(d, "h3", {}, ["Review history"]),
        el(
          d,
          "ul",
          {},
          card.audit.map((entry) =>
            el(d, "li", {}, [`${entry.verdict} by ${entry.reviewer_id} at ${entry.timestamp}`]),
          ),
        ),
      );
    }

    const actions = el(d, "footer", { id: "actions" });
    if (!this.editing) {
      const approve = el(d, "button", { id: "approve-btn", type: "button" }, ["Approve (a)"]);
      approve.addEventListener("click", () => this.submitSimple("APPROVE"));
      const reject = el(d, "button", { id: "reject-btn", type: "button" }, ["Reject (r)"]);
      reject.addEventListener("click", () => this.submitSimple("REJECT"));
      const edit = el(d, "button", { id: "edit-btn", type: "button" }, ["Edit (e)"]);
      edit.addEventListener("click", () => this.enterEditMode(card));
      const next = el(d, "button", { id: "next-btn", type: "button" }, ["Skip to next"]);
      next.addEventListener("click", () => void this.run(() => this.loadNext()));
      for (const button of [approve, reject, edit, next]) {
        if (busy) {
          button.setAttribute("disabled", "");
        }
        actions.append(button);
      }
    }

    const validation = el(d, "p", { id: "validation-msg" }, [
      this.validationMessage ?? "",
    ]);

    return el(d, "article", { id: "card", "data-version": String(card.record_version) }, [
      header,
      media,
      evidence,
      body,
      audit,
      validation,
      actions,
    ]);
  }

  private renderReadView(card: ReviewCard): HTMLElement {
    const d = this.document;
    return el(d, "section", { id: "annotation" }, [
      el(d, "p", { id: "reason" }, [card.reason]),
      el(
        d,
        "ul",
        { id: "labels" },
        card.open_vocab_labels.map((label) =>
          el(d, "li", { class: "chip", "data-label": label }, [label]),
        ),
      ),
    ]);
  }

  private renderEditForm(): HTMLElement {
    const d = this.document;
    // edit state lives on the app, not the DOM, so re-renders (adding or
    // removing a chip) never lose typed text
    const reasonInput = el(d, "textarea", { id: "reason-input" });
    reasonInput.value = this.editReason;
    reasonInput.addEventListener("input", () => {
      this.editReason = reasonInput.value;
    });

    const chips = el(d, "ul", { id: "labels" });
    for (const label of this.editLabels) {
      const remove = el(d, "button", { class: "chip-remove", type: "button" }, ["x"]);
      remove.addEventListener("click", () => {
        this.editLabels = this.editLabels.filter((existing) => existing !== label);
        this.render();
      });
      chips.append(el(d, "li", { class: "chip", "data-label": label }, [label, remove]));
    }

    const labelInput = el(d, "input", { id: "label-input", type: "text" });
    const addLabel = () => {
      const value = labelInput.value.trim().toLowerCase();
      if (value !== "" && !this.editLabels.includes(value)) {
        this.editLabels.push(value);
      }
      labelInput.value = "";
      this.render();
    };
    labelInput.addEventListener("keydown", (event) => {
      if (event.key === "Enter") {
        event.preventDefault();
        addLabel();
      }
    });
    const addButton = el(d, "button", { id: "add-label-btn", type: "button" }, ["Add label"]);
    addButton.addEventListener("click", addLabel);

    const intensityInput = el(d, "input", {
      id: "intensity-input",
      type: "number",
      min: "1",
      max: "5",
      value: this.editIntensity,
    });
    intensityInput.addEventListener("input", () => {
      this.editIntensity = intensityInput.value;
    });

    const save = el(d, "button", { id: "save-edit-btn", type: "button" }, ["Save edit"]);
    save.addEventListener("click", () => this.saveEdit());
    const cancel = el(d, "button", { id: "cancel-edit-btn", type: "button" }, ["Cancel"]);
    cancel.addEventListener("click", () => {
      this.editing = false;
      this.validationMessage = null;
      this.render();
    });

    return el(d, "section", { id: "annotation", class: "editing" }, [
      reasonInput,
      chips,
      el(d, "div", {}, [labelInput, addButton]),
      el(d, "label", {}, ["intensity ", intensityInput]),
      el(d, "div", {}, [save, cancel]),
    ]);
  }
}
