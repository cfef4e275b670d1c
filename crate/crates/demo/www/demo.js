import init, { lr_curve, score_iob, train_toy } from "./pkg/multitag_demo.js";

const $ = (id) => document.getElementById(id);

// Draws each series [{values, color, dash, label}] scaled to the canvas.
function plot(canvas, series, yMax) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 30;
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, 5, w - pad - 5, h - pad - 5);
  ctx.fillStyle = "#333";
  ctx.fillText(yMax.toPrecision(2), 2, 12);
  ctx.fillText("0", 2, h - pad);
  let legendY = 18;
  for (const s of series) {
    const n = s.values.length;
    ctx.strokeStyle = s.color;
    ctx.setLineDash(s.dash || []);
    ctx.beginPath();
    s.values.forEach((v, i) => {
      const x = pad + (n === 1 ? 0 : (i / (n - 1)) * (w - pad - 5));
      const y = h - pad - (v / yMax) * (h - pad - 10);
      i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
    });
    ctx.stroke();
    if (s.label) {
      ctx.fillStyle = s.color;
      ctx.fillText(s.label, w - 150, legendY);
      legendY += 14;
    }
  }
  ctx.setLineDash([]);
}

function showLr() {
  const values = JSON.parse(lr_curve(+$("lr-total").value, +$("lr-warmup").value, +$("lr-peak").value));
  plot($("lr-canvas"), [{ values, color: "#2a6" }], Math.max(...values) || 1);
}

function showIob() {
  const out = $("iob-out");
  try {
    const r = JSON.parse(score_iob($("iob-gold").value, $("iob-pred").value));
    const fmt = (spans) => spans.map((s) => `${s.entity_type}[${s.start}..${s.end}]`).join(" ") || "(none)";
    out.className = "";
    out.textContent =
      `gold spans:      ${fmt(r.gold)}\npredicted spans: ${fmt(r.predicted)}\n` +
      `tp ${r.tp}  fp ${r.fp}  fn ${r.fn}\n` +
      `precision ${r.precision.toFixed(3)}  recall ${r.recall.toFixed(3)}  F1 ${r.f1.toFixed(3)}`;
  } catch (e) {
    out.className = "err";
    out.textContent = String(e);
  }
}

function showTraining() {
  const epochs = +$("tr-epochs").value;
  const seed = +$("tr-seed").value;
  $("tr-status").textContent = "training…";
  // Let the status repaint before the synchronous run.
  setTimeout(() => {
    try {
      const colors = ["#c33", "#36c"];
      const series = [];
      for (const [alg, dash] of [["merged", []], ["ordered", [5, 4]]]) {
        JSON.parse(train_toy(alg, epochs, BigInt(seed))).forEach((c, i) =>
          series.push({ values: c.dev_f1, color: colors[i], dash, label: `${alg} ${c.task_id}` }));
      }
      plot($("tr-canvas"), series, 1);
      $("tr-status").textContent = "dev F1 per epoch (solid: merged, dashed: ordered)";
    } catch (e) {
      $("tr-status").textContent = String(e);
    }
  }, 20);
}

await init();
$("lr-go").onclick = showLr;
$("iob-go").onclick = showIob;
$("tr-go").onclick = showTraining;
showLr();
showIob();
