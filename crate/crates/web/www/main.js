import init, { partitionRgba, mergeView, speedupCurve } from "./pkg/tomesd_web.js";

const $ = (id) => document.getElementById(id);

function paint(canvas, rgba, size) {
  canvas.width = size;
  canvas.height = size;
  canvas.getContext("2d").putImageData(new ImageData(new Uint8ClampedArray(rgba), size, size), 0, 0);
}

function guarded(errorId, f) {
  return () => {
    try {
      $(errorId).textContent = "";
      f();
    } catch (e) {
      $(errorId).textContent = String(e.message ?? e);
    }
  };
}

const drawPartition = guarded("p-error", () => {
  const size = Number($("p-size").value);
  $("p-size-out").textContent = `${size}x${size}`;
  $("p-step-out").textContent = $("p-step").value;
  const rgba = partitionRgba($("p-scheme").value, size, size, BigInt($("p-seed").value || 0), Number($("p-step").value));
  paint($("p-canvas"), rgba, size);
});

const drawMerge = guarded("m-error", () => {
  const ratio = Number($("m-ratio").value);
  $("m-ratio-out").textContent = ratio.toFixed(2);
  const view = mergeView($("m-scheme").value, ratio, 32, 32, 7n, $("m-prune").checked);
  paint($("m-source"), view.source, 32);
  paint($("m-map"), view.mergeMap, 32);
  paint($("m-recon"), view.reconstruction, 32);
  $("m-removed").textContent = view.removed;
  $("m-err").textContent = view.relativeError.toFixed(4);
  view.free();
});

const drawCurve = guarded("s-error", () => {
  const comps = [...document.querySelectorAll(".s-comp:checked")].map((c) => c.value).join(",");
  const canvas = $("s-canvas");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  if (!comps) return;
  const step = 0.05;
  const curve = speedupCurve(Number($("s-latent").value), 64, comps, "rand2x2", step);
  const maxY = Math.max(2, ...curve);
  const x = (i) => 40 + (i * step / 0.8) * (canvas.width - 60);
  const y = (v) => canvas.height - 30 - ((v - 1) / (maxY - 1)) * (canvas.height - 50);
  ctx.strokeStyle = "#999";
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.beginPath();
  ctx.moveTo(40, 10);
  ctx.lineTo(40, canvas.height - 30);
  ctx.lineTo(canvas.width - 10, canvas.height - 30);
  ctx.stroke();
  for (let r = 0; r <= 0.8; r += 0.2) ctx.fillText(r.toFixed(1), x(r / step) - 8, canvas.height - 14);
  for (let v = 1; v <= maxY; v += 0.5) ctx.fillText(`${v.toFixed(1)}x`, 4, y(v) + 4);
  ctx.strokeStyle = "#2a6fdb";
  ctx.lineWidth = 2;
  ctx.beginPath();
  curve.forEach((v, i) => (i ? ctx.lineTo(x(i), y(v)) : ctx.moveTo(x(i), y(v))));
  ctx.stroke();
});

await init();
for (const id of ["p-scheme", "p-size", "p-seed", "p-step"]) $(id).addEventListener("input", drawPartition);
for (const id of ["m-scheme", "m-ratio", "m-prune"]) $(id).addEventListener("input", drawMerge);
for (const el of [...document.querySelectorAll(".s-comp"), $("s-latent")]) el.addEventListener("input", drawCurve);
drawPartition();
drawMerge();
drawCurve();
