import init, { noiseTransition, blendLabel, DemoRun, defaultSeed } from "./pkg/mslc_web.js";

const $ = (id) => document.getElementById(id);
const COLORS = ["#d1495b", "#00798c", "#edae49", "#66a182", "#8d6a9f", "#2e4057", "#f26419", "#33658a", "#86bbd8", "#758e4f"];

function showError(e) {
  $("error").textContent = e ? String(e.message ?? e) : "";
}

function matrixTable(title, rows) {
  const head = rows.map((_, j) => `<th>${j}</th>`).join("");
  const body = rows
    .map((r, i) => `<tr><th>${i}</th>${r.map((v) => `<td style="background:rgba(74,127,181,${v})">${v.toFixed(3)}</td>`).join("")}</tr>`)
    .join("");
  return `<table><caption>${title}</caption><tr><th></th>${head}</tr>${body}</table>`;
}

function updateNoise() {
  $("n-ratio-v").textContent = $("n-ratio").value;
  try {
    const v = JSON.parse(
      noiseTransition(
        $("n-kind").value,
        Number($("n-ratio").value),
        Number($("n-classes").value),
        $("n-self").checked,
        Number($("n-samples").value),
        1,
      ),
    );
    $("n-out").innerHTML =
      matrixTable("expected P(observed | true)", v.expected) +
      matrixTable("realized", v.empirical) +
      `<p>realized corruption rate ${v.realized_rate.toFixed(4)}</p>`;
    showError();
  } catch (e) {
    showError(e);
  }
}

const parseVec = (s) => s.split(",").map((x) => Number(x.trim()));

function updateBlend() {
  $("b-alpha-v").textContent = $("b-alpha").value;
  $("b-beta-v").textContent = $("b-beta").value;
  try {
    const hat = parseVec($("b-hat").value);
    const prev = parseVec($("b-prev").value);
    const v = JSON.parse(blendLabel(Number($("b-y").value), hat, prev, Number($("b-alpha").value), Number($("b-beta").value)));
    const rows = v.corrected
      .map((p, k) => `<tr><th>${k}</th><td>${p.toFixed(3)}</td><td style="text-align:left"><span class="bar" style="width:${p * 200}px"></span></td></tr>`)
      .join("");
    $("b-out").innerHTML =
      `<table><caption>corrected label, argmax ${v.hard}</caption>${rows}</table>` +
      `<p>α-net input CE(ŷ, y) = ${v.l_alpha.toFixed(3)}, β-net input CE(ŷ, ỹ<sub>prev</sub>) = ${v.l_beta.toFixed(3)}</p>`;
    showError();
  } catch (e) {
    showError(e);
  }
}

function drawCurves(canvas, series, epochs, warmup) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  const x = (e) => pad + ((e - 1) / Math.max(1, epochs - 1)) * (w - 2 * pad);
  const y = (v) => h - pad - v * (h - 2 * pad);
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#ccc";
  ctx.fillStyle = "#666";
  ctx.font = "11px sans-serif";
  for (const v of [0, 0.25, 0.5, 0.75, 1]) {
    ctx.beginPath();
    ctx.moveTo(pad, y(v));
    ctx.lineTo(w - pad, y(v));
    ctx.stroke();
    ctx.fillText(v.toFixed(2), 2, y(v) + 4);
  }
  ctx.setLineDash([4, 4]);
  ctx.beginPath();
  ctx.moveTo(x(warmup + 0.5), pad);
  ctx.lineTo(x(warmup + 0.5), h - pad);
  ctx.stroke();
  ctx.setLineDash([]);
  ctx.fillText("epoch", w - pad - 30, h - 8);
  for (const s of series) {
    ctx.strokeStyle = s.color;
    ctx.lineWidth = 2;
    ctx.beginPath();
    s.values.forEach(([e, v], i) => (i ? ctx.lineTo(x(e), y(v)) : ctx.moveTo(x(e), y(v))));
    ctx.stroke();
  }
  ctx.lineWidth = 1;
}

function drawPoints(canvas, flat, column, title) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pts = [];
  for (let i = 0; i < flat.length; i += 4) pts.push(flat.slice(i, i + 4));
  const xs = pts.map((p) => p[0]);
  const ys = pts.map((p) => p[1]);
  const [x0, x1, y0, y1] = [Math.min(...xs), Math.max(...xs), Math.min(...ys), Math.max(...ys)];
  ctx.clearRect(0, 0, w, h);
  for (const p of pts) {
    ctx.fillStyle = COLORS[p[column]];
    ctx.fillRect(8 + ((p[0] - x0) / (x1 - x0)) * (w - 16) - 1.5, h - 8 - ((p[1] - y0) / (y1 - y0)) * (h - 24) - 1.5, 3, 3);
  }
  ctx.fillStyle = "#222";
  ctx.font = "12px sans-serif";
  ctx.fillText(title, 8, 14);
}

let running = null;

async function runTraining() {
  const token = {};
  running = token;
  const ratio = Number($("t-ratio").value);
  const seed = Number($("t-seed").value);
  let ce, mslc;
  try {
    ce = new DemoRun("ce", ratio, seed);
    mslc = new DemoRun("mslc", ratio, seed);
    showError();
  } catch (e) {
    showError(e);
    return;
  }
  const curves = { ce: [], mslc: [], corrected: [] };
  let warmup = 0;
  let epochs = 0;
  while (!mslc.finished && running === token) {
    const a = JSON.parse(ce.step());
    const b = JSON.parse(mslc.step());
    epochs = b.epoch;
    if (b.phase === "plain") warmup = b.epoch;
    curves.ce.push([a.epoch, a.test_accuracy]);
    curves.mslc.push([b.epoch, b.test_accuracy]);
    if (b.labels) curves.corrected.push([b.epoch, b.labels.corrected.overall]);
    drawCurves($("t-curve"), [
      { color: COLORS[0], values: curves.ce },
      { color: COLORS[1], values: curves.mslc },
      { color: COLORS[2], values: curves.corrected },
    ], 30, warmup);
    const pts = mslc.points();
    drawPoints($("t-observed"), pts, 2, "observed labels");
    drawPoints($("t-corrected"), pts, 3, "corrected labels");
    $("t-status").textContent = `epoch ${epochs} (${b.phase})`;
    await new Promise(requestAnimationFrame);
  }
  ce.free();
  mslc.free();
  if (running === token) {
    const last = (c) => (c.length ? c[c.length - 1][1].toFixed(3) : "-");
    $("t-status").textContent = `done: CE ${last(curves.ce)}, corrector ${last(curves.mslc)}, corrected labels ${last(curves.corrected)}`;
  }
}

await init();
$("t-seed").value = defaultSeed();
$("t-ratio-v").textContent = $("t-ratio").value;
for (const id of ["n-kind", "n-ratio", "n-classes", "n-self", "n-samples"]) $(id).addEventListener("input", updateNoise);
for (const id of ["b-y", "b-hat", "b-prev", "b-alpha", "b-beta"]) $(id).addEventListener("input", updateBlend);
$("t-ratio").addEventListener("input", () => ($("t-ratio-v").textContent = $("t-ratio").value));
$("t-run").addEventListener("click", runTraining);
$("t-legend").innerHTML =
  `<span style="color:${COLORS[0]}">■</span> CE test accuracy &nbsp; ` +
  `<span style="color:${COLORS[1]}">■</span> corrector test accuracy &nbsp; ` +
  `<span style="color:${COLORS[2]}">■</span> corrected-label accuracy &nbsp; dashed: end of warm-up`;
updateNoise();
updateBlend();
