import init, { check_summary, reference_summary, Session } from "./pkg/tema_wasm.js";

const $ = (id) => document.getElementById(id);
let session = null;
const history = [];

function show(el, text, bad = false) {
  el.textContent = text;
  el.classList.toggle("err", bad);
}

function newSession() {
  session?.free();
  history.length = 0;
  try {
    session = new Session(+$("n").value, BigInt($("seed").value), +$("channels").value, +$("lr").value);
    show($("log"), "epoch\tloss\tR@1\n");
  } catch (e) {
    session = null;
    show($("log"), String(e), true);
  }
  drawCurve();
}

function drawCurve() {
  const c = $("curve").getContext("2d");
  const w = c.canvas.width, h = c.canvas.height;
  c.clearRect(0, 0, w, h);
  if (history.length < 2) return;
  const maxLoss = Math.max(...history.map((p) => p.loss));
  const line = (key, scale, color) => {
    c.strokeStyle = color;
    c.beginPath();
    history.forEach((p, i) => {
      const x = (i / (history.length - 1)) * (w - 20) + 10;
      const y = h - 10 - (p[key] / scale) * (h - 20);
      i ? c.lineTo(x, y) : c.moveTo(x, y);
    });
    c.stroke();
  };
  line("loss", maxLoss, "#c33");
  line("r1", 1, "#36c");
  c.fillStyle = "#c33";
  c.fillText("loss", 12, 14);
  c.fillStyle = "#36c";
  c.fillText("R@1", 50, 14);
}

async function train() {
  if (!session) newSession();
  if (!session) return;
  for (let i = 0; i < 10; i++) {
    try {
      const p = JSON.parse(session.step());
      history.push(p);
      $("log").textContent += `${p.epoch}\t${p.loss.toFixed(4)}\t${p.r1.toFixed(3)}\n`;
      $("log").scrollTop = $("log").scrollHeight;
      drawCurve();
    } catch (e) {
      show($("log"), String(e), true);
      return;
    }
    // let the page repaint between epochs
    await new Promise((r) => setTimeout(r, 0));
  }
}

function drawGram() {
  if (!session) newSession();
  if (!session) return;
  let g;
  try {
    g = session.gram($("query").value);
  } catch (e) {
    show($("overlap"), String(e), true);
    return;
  }
  const n = session.channels();
  const c = $("heat").getContext("2d");
  const cell = c.canvas.width / n;
  for (let i = 0; i < n; i++) {
    for (let j = 0; j < n; j++) {
      // |cos| in [0, 1]: white is orthogonal, dark is aligned
      const v = Math.round(255 * (1 - Math.min(1, Math.abs(g[i * n + j]))));
      c.fillStyle = `rgb(${v},${v},255)`;
      c.fillRect(j * cell, i * cell, cell, cell);
    }
  }
  show($("overlap"), `mean off-diagonal |a_i . a_j| = ${g[n * n].toFixed(4)}`);
}

await init();
$("suggest").onclick = () => {
  try {
    $("summary").value = reference_summary($("mmt").value);
    $("check").onclick();
  } catch (e) {
    show($("verdict"), String(e), true);
  }
};
$("check").onclick = () => {
  show($("verdict"), JSON.stringify(JSON.parse(check_summary($("mmt").value, $("summary").value)), null, 2));
};
$("reset").onclick = newSession;
$("run").onclick = train;
$("gram").onclick = drawGram;
newSession();
