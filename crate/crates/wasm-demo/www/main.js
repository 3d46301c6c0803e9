import init, { pvalue_curves, loss_profile, thickness_sweep } from "./pkg/wasm_demo.js";

const COLORS = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);

function draw(series, { logx = false, logy = false, hline = null } = {}) {
  const c = $("plot");
  const g = c.getContext("2d");
  g.clearRect(0, 0, c.width, c.height);
  const tx = (v) => (logx ? Math.log(v) : v);
  const ty = (v) => (logy ? Math.log(Math.max(v, 1e-300)) : v);
  const xs = series.flatMap((s) => s.x.map(tx));
  const ys = series.flatMap((s) => s.y.map(ty)).filter(Number.isFinite);
  if (hline !== null) ys.push(ty(hline));
  const [x0, x1] = [Math.min(...xs), Math.max(...xs)];
  const [y0, y1] = [Math.min(...ys), Math.max(...ys)];
  const pad = 40;
  const px = (v) => pad + ((tx(v) - x0) / (x1 - x0 || 1)) * (c.width - 2 * pad);
  const py = (v) => c.height - pad - ((ty(v) - y0) / (y1 - y0 || 1)) * (c.height - 2 * pad);
  g.strokeStyle = "#999";
  g.strokeRect(pad, pad, c.width - 2 * pad, c.height - 2 * pad);
  g.fillStyle = "#555";
  g.fillText(`${(logx ? Math.exp(x0) : x0).toPrecision(3)}`, pad, c.height - pad + 14);
  g.fillText(`${(logx ? Math.exp(x1) : x1).toPrecision(3)}`, c.width - pad - 30, c.height - pad + 14);
  g.fillText(`${(logy ? Math.exp(y1) : y1).toPrecision(3)}`, 2, pad + 4);
  g.fillText(`${(logy ? Math.exp(y0) : y0).toPrecision(3)}`, 2, c.height - pad);
  if (hline !== null) {
    g.strokeStyle = "#aaa";
    g.setLineDash([4, 4]);
    g.beginPath();
    g.moveTo(pad, py(hline));
    g.lineTo(c.width - pad, py(hline));
    g.stroke();
    g.setLineDash([]);
  }
  series.forEach((s, k) => {
    g.strokeStyle = s.color ?? COLORS[k % COLORS.length];
    g.setLineDash(s.dash ?? []);
    g.beginPath();
    s.x.forEach((x, i) => (i ? g.lineTo(px(x), py(s.y[i])) : g.moveTo(px(x), py(s.y[i]))));
    g.stroke();
  });
  g.setLineDash([]);
  $("legend").innerHTML = series
    .map((s, k) => `<span style="color:${s.color ?? COLORS[k % COLORS.length]}">&#9644; ${s.name}</span>`)
    .join("");
}

function loss() {
  return [$("family").value, num("a"), num("t")];
}

function run(f) {
  try {
    f();
  } catch (e) {
    $("info").textContent = `error: ${e}`;
  }
}

function showCurves() {
  const r = JSON.parse(pvalue_curves(num("n"), BigInt(num("seed")), num("lambda"), ...loss(), num("alpha")));
  const series = [{ name: "full (exact)", x: r.y, y: r.full, color: "#000" }];
  r.methods.forEach((m, k) => {
    series.push({ name: `${m.name} upper`, x: r.y, y: m.upper, color: COLORS[k] });
    series.push({ name: `${m.name} lower`, x: r.y, y: m.lower, color: COLORS[k], dash: [3, 3] });
  });
  draw(series, { hline: r.alpha });
  $("info").textContent =
    `true query output ${r.y_true.toFixed(3)}; full region measure ${r.full_measure.toFixed(3)}\n` +
    r.methods.map((m) => `${m.name}: upper ${m.upper_measure.toFixed(3)}, lower ${m.lower_measure.toFixed(3)}`).join("\n");
}

function showProfile() {
  const r = JSON.parse(loss_profile(...loss()));
  draw([
    { name: "loss", x: r.u, y: r.value },
    { name: "first derivative", x: r.u, y: r.d1 },
    { name: "second derivative", x: r.u, y: r.d2 },
  ]);
  $("info").textContent = `rho ${r.rho.toPrecision(4)}, beta2 ${r.beta2.toPrecision(4)}, xi ${r.xi.toPrecision(4)}`;
}

function showSweep() {
  const r = JSON.parse(thickness_sweep(...loss(), BigInt(num("seed"))));
  const names = [...new Set(r.rows.map((row) => row.method))];
  const series = [];
  names.forEach((name, k) => {
    const rows = r.rows.filter((row) => row.method === name);
    const x = rows.map((row) => row.n);
    series.push({ name: `${name} gap`, x, y: rows.map((row) => row.delta), color: COLORS[k] });
    series.push({ name: `${name} bound`, x, y: rows.map((row) => row.bound), color: COLORS[k], dash: [3, 3] });
  });
  draw(series, { logx: true, logy: true });
  $("info").textContent = r.rows.map((row) => `${row.method} n=${row.n}: gap ${row.delta.toExponential(3)}, bound ${row.bound.toExponential(3)}`).join("\n");
}

await init();
$("curves").onclick = () => run(showCurves);
$("profile").onclick = () => run(showProfile);
$("sweep").onclick = () => run(showSweep);
run(showCurves);
