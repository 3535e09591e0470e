// Build with `wasm-pack build crates/demo --target web --out-dir www/pkg`.
import init, { renderPrompt, contrastiveLoss, AlignDemo } from "./pkg/ctrl_demo.js";

const $ = (id) => document.getElementById(id);

function showPrompt() {
  try {
    $("prompt").textContent = renderPrompt($("user").value, $("item").value, $("noun").value, Number($("variant").value));
  } catch (e) {
    $("prompt").textContent = `error: ${e.message ?? e}`;
  }
}

function showLoss() {
  const tau = Number($("tau").value);
  $("tau-value").textContent = tau.toFixed(2);
  try {
    const out = JSON.parse(contrastiveLoss($("matrix").value, tau));
    const soft = out.softmax.map((r) => r.map((v) => v.toFixed(3)).join("  ")).join("\n");
    $("loss").textContent =
      `text->table ${out.text2tab.toFixed(4)}\ntable->text ${out.tab2text.toFixed(4)}\nmean ${out.ccl.toFixed(4)}\n\nsoftmax(S / tau):\n${soft}`;
  } catch (e) {
    $("loss").textContent = `error: ${e.message ?? e}`;
  }
}

let demo;

function draw() {
  const snap = JSON.parse(demo.snapshot());
  const loss = snap.loss === null ? "-" : snap.loss.toFixed(4);
  $("status").textContent =
    `step ${snap.step}, batch loss ${loss}, paired ${snap.paired.toFixed(3)}, unpaired ${snap.unpaired.toFixed(3)}, gap ${snap.gap.toFixed(3)}`;
  const canvas = $("plot");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  const pts = snap.points;
  const half = pts.length / 2;
  const span = Math.max(1e-9, ...pts.flatMap(([x, y]) => [Math.abs(x), Math.abs(y)]));
  const scale = (canvas.width / 2 - 12) / span;
  const at = ([x, y]) => [canvas.width / 2 + x * scale, canvas.height / 2 - y * scale];
  ctx.strokeStyle = "#ddd";
  for (let i = 0; i < half; i++) {
    const [ax, ay] = at(pts[i]);
    const [bx, by] = at(pts[i + half]);
    ctx.beginPath();
    ctx.moveTo(ax, ay);
    ctx.lineTo(bx, by);
    ctx.stroke();
  }
  pts.forEach((p, i) => {
    const [x, y] = at(p);
    ctx.fillStyle = i < half ? "#1f77b4" : "#ff7f0e";
    ctx.beginPath();
    ctx.arc(x, y, 3.5, 0, 2 * Math.PI);
    ctx.fill();
  });
}

function train(steps) {
  try {
    demo.train(steps);
    draw();
  } catch (e) {
    $("status").textContent = `error: ${e.message ?? e}`;
  }
}

async function main() {
  await init();
  for (const id of ["user", "item", "noun", "variant"]) $(id).addEventListener("input", showPrompt);
  for (const id of ["matrix", "tau"]) $(id).addEventListener("input", showLoss);
  $("train1").addEventListener("click", () => train(1));
  $("train20").addEventListener("click", () => train(20));
  $("reset").addEventListener("click", () => {
    demo = new AlignDemo(0);
    draw();
  });
  showPrompt();
  showLoss();
  demo = new AlignDemo(0);
  draw();
}

main();
