// @vitest-environment jsdom
/** Browser-level tests: the DOM app drives a live mock-backed review service. */

import { afterAll, afterEach, beforeAll, expect, test } from "vitest";

import { ReviewApi, ReviewCard } from "../src/api.js";
import { ReviewApp, ReviewServiceLike } from "../src/app.js";
import { LiveService, startService } from "./service.js";

let service: LiveService;
let api: ReviewApi;
let rival: ReviewApi;
let container: HTMLElement;
let app: ReviewApp;

beforeAll(async () => {
  service = await startService();
  api = new ReviewApi(service.base, "ui-reviewer");
  rival = new ReviewApi(service.base, "rival");
  container = document.createElement("div");
  document.body.append(container);
  app = new ReviewApp(container, api);
  await app.start();
});

afterAll(() => {
  app.destroy();
  service.stop();
});

afterEach(async () => {
  await app.settle();
});

function query<T extends HTMLElement>(selector: string): T {
  const node = container.querySelector<T>(selector);
  if (node === null) {
    throw new Error(`expected ${selector} in the rendered page`);
  }
  return node;
}

function pressKey(key: string): void {
  document.dispatchEvent(new KeyboardEvent("keydown", { key, bubbles: true }));
}

function typeInto(element: HTMLTextAreaElement | HTMLInputElement, text: string): void {
  element.value = text;
  element.dispatchEvent(new Event("input", { bubbles: true }));
}

test("renders the first card: media, evidence groups, label chips", () => {
  const card = app.card as ReviewCard;
  expect(card).not.toBeNull();
  expect(query("#clip-id").textContent).toBe(card.clip_id);
  expect(query<HTMLVideoElement>("#media-video").getAttribute("src")).toContain(
    "/api/media/",
  );
  const chips = container.querySelectorAll("#labels .chip");
  expect(chips).toHaveLength(card.open_vocab_labels.length);
  const kinds = [...container.querySelectorAll("#evidence .evidence-group")].map(
    (group) => group.getAttribute("data-kind"),
  );
  expect(new Set(kinds).size).toBe(kinds.length);
  expect(kinds.length).toBeGreaterThan(0);
  expect(query("#reason").textContent).toBe(card.reason);
  expect(query("#score").textContent).toContain("score");
});

test("approve hotkey submits and advances to the next card", async () => {
  const before = (app.card as ReviewCard).clip_id;
  pressKey("a");
  await app.settle();
  expect((app.card as ReviewCard).clip_id).not.toBe(before);

  const reviewed = await api.fetchRecord(before);
  expect(reviewed.review_status).toBe("HUMAN_APPROVED");
  expect(reviewed.audit[0].reviewer_id).toBe("ui-reviewer");
});

test("reject button submits and advances", async () => {
  const before = (app.card as ReviewCard).clip_id;
  query<HTMLButtonElement>("#reject-btn").click();
  await app.settle();
  expect((app.card as ReviewCard).clip_id).not.toBe(before);
  expect((await api.fetchRecord(before)).review_status).toBe("HUMAN_REJECTED");
});

test("edit removing every label is blocked before any request", async () => {
  const card = app.card as ReviewCard;
  pressKey("e");
  let removeButtons = container.querySelectorAll<HTMLButtonElement>(".chip-remove");
  while (removeButtons.length > 0) {
    removeButtons[0].click();
    removeButtons = container.querySelectorAll<HTMLButtonElement>(".chip-remove");
  }
  query<HTMLButtonElement>("#save-edit-btn").click();
  await app.settle();

  expect(query("#validation-msg").textContent).toContain("label");
  // nothing was posted: the service still holds the untouched version
  const unchanged = await api.fetchRecord(card.clip_id);
  expect(unchanged.review_status).toBe("SELF_REVIEWED");
  expect(unchanged.record_version).toBe(card.record_version);
  expect((app.card as ReviewCard).clip_id).toBe(card.clip_id);

  query<HTMLButtonElement>("#cancel-edit-btn").click();
});

test("edit with an empty reason is blocked client-side", async () => {
  const card = app.card as ReviewCard;
  query<HTMLButtonElement>("#edit-btn").click();
  typeInto(query<HTMLTextAreaElement>("#reason-input"), "   ");
  query<HTMLButtonElement>("#save-edit-btn").click();
  await app.settle();

  expect(query("#validation-msg").textContent).toContain("reason");
  expect((await api.fetchRecord(card.clip_id)).record_version).toBe(card.record_version);
  query<HTMLButtonElement>("#cancel-edit-btn").click();
});

test("a valid edit posts the new fields and advances", async () => {
  const card = app.card as ReviewCard;
  query<HTMLButtonElement>("#edit-btn").click();
  typeInto(
    query<HTMLTextAreaElement>("#reason-input"),
    "voice trembles while the face stays flat",
  );
  // adding a chip re-renders the form; the typed reason must survive
  typeInto(query<HTMLInputElement>("#label-input"), "uneasy");
  query<HTMLButtonElement>("#add-label-btn").click();
  expect(query<HTMLTextAreaElement>("#reason-input").value).toBe(
    "voice trembles while the face stays flat",
  );
  query<HTMLButtonElement>("#save-edit-btn").click();
  await app.settle();

  const edited = await api.fetchRecord(card.clip_id);
  expect(edited.review_status).toBe("HUMAN_EDITED");
  expect(edited.reason).toBe("voice trembles while the face stays flat");
  expect(edited.open_vocab_labels).toContain("uneasy");
  expect(edited.audit[0].prior_reason).toBe(card.reason);
  expect((app.card as ReviewCard).clip_id).not.toBe(card.clip_id);
});

test("a stale verdict opens the conflict dialog and overwrites nothing", async () => {
  const card = app.card as ReviewCard;

  // someone else reviews the same record first
  const theirs = await rival.fetchRecord(card.clip_id);
  await rival.submitVerdict(card.clip_id, "APPROVE", theirs.record_version);

  query<HTMLButtonElement>("#approve-btn").click();
  await app.settle();

  expect(container.querySelector("#conflict-dialog")).not.toBeNull();
  const onServer = await api.fetchRecord(card.clip_id);
  expect(onServer.review_status).toBe("HUMAN_APPROVED");
  expect(onServer.audit[0].reviewer_id).toBe("rival");

  query<HTMLButtonElement>("#conflict-reload").click();
  await app.settle();
  expect(container.querySelector("#conflict-dialog")).toBeNull();
  expect(query("#status").textContent).toBe("HUMAN_APPROVED");
  expect(query("#card").getAttribute("data-version")).toBe(
    String(onServer.record_version),
  );
});

test("a drained queue renders the empty state", async () => {
  // clear the remaining records out-of-band, then ask the app to advance
  for (let i = 0; i < 20; i += 1) {
    const card = await rival.fetchNext();
    if (card === null) {
      break;
    }
    await rival.submitVerdict(card.clip_id, "APPROVE", card.record_version);
  }
  query<HTMLButtonElement>("#next-btn").click();
  await app.settle();
  expect(container.querySelector("#empty-state")).not.toBeNull();
});

test("a network failure shows a retry banner and retrying recovers", async () => {
  const sample: ReviewCard = {
    clip_id: "clip-offline",
    source_dataset: "DFEW",
    evidence: [],
    reason: "placeholder",
    open_vocab_labels: ["calm"],
    intensity: 3,
    alignment_score: 6,
    review_status: "SELF_REVIEWED",
    audit: [],
    record_version: 0,
    video_url: "http://127.0.0.1:1/media",
    audio_url: "http://127.0.0.1:1/media",
  };
  let attempts = 0;
  const flaky: ReviewServiceLike = {
    fetchNext: async () => {
      attempts += 1;
      if (attempts === 1) {
        throw new Error("connection refused");
      }
      return sample;
    },
    fetchRecord: async () => sample,
    submitVerdict: async () => sample,
  };
  const offlineContainer = document.createElement("div");
  document.body.append(offlineContainer);
  const offlineApp = new ReviewApp(offlineContainer, flaky);
  try {
    await offlineApp.start();
    const banner = offlineContainer.querySelector("#status-banner");
    expect(banner).not.toBeNull();
    expect(banner!.textContent).toContain("connection refused");

    offlineContainer.querySelector<HTMLButtonElement>("#retry-btn")!.click();
    await offlineApp.settle();
    expect(offlineContainer.querySelector("#status-banner")).toBeNull();
    expect(offlineContainer.querySelector("#clip-id")!.textContent).toBe("clip-offline");
  } finally {
    offlineApp.destroy();
    offlineContainer.remove();
  }
});
