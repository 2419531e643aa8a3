import init, { simulate_and_fit, efficiency_bounds, fit_csv } from "./pkg/crossed_lmm_web.js";

const $ = (id) => document.getElementById(id);
const num = (id) => Number($(id).value);
const fmt = (v) => (v === null || v === undefined ? "–" : Number(v).toPrecision(4));

function coefTable(fit, truth) {
  const head = ["", truth ? "truth" : null, "GLS", "se", "OLS", "naive se", "sandwich se"].filter((h) => h !== null);
  let html = "<table><tr>" + head.map((h) => `<th>${h}</th>`).join("") + "</tr>";
  fit.beta.forEach((b, k) => {
    const cells = [
      `beta${k}`,
      truth ? fmt(truth[k]) : null,
      fmt(b),
      fmt(fit.se[k]),
      fmt(fit.ols_beta[k]),
      fmt(fit.ols_naive_se[k]),
      fmt(fit.ols_sandwich_se[k]),
    ].filter((c) => c !== null);
    html += "<tr>" + cells.map((c) => `<td>${c}</td>`).join("") + "</tr>";
  });
  return html + "</table>";
}

function componentTable(fit, truth) {
  const s = fit.sigma2;
  const rows = [
    ["σ²A", s.raw_a, s.a, truth && truth[0]],
    ["σ²B", s.raw_b, s.b, truth && truth[1]],
    ["σ²E", s.raw_e, s.e, truth && truth[2]],
  ];
  let html = "<table><tr><th></th><th>raw</th><th>used</th>" + (truth ? "<th>truth</th>" : "") + "</tr>";
  for (const [name, raw, used, t] of rows) {
    html += `<tr><td>${name}</td><td>${fmt(raw)}</td><td>${fmt(used)}</td>` + (truth ? `<td>${fmt(t)}</td>` : "") + "</tr>";
  }
  return html + "</table>";
}

function summary(fit) {
  const p = fit.profile;
  const mode = fit.mode === null ? "OLS fallback" : `${fit.mode} GLS`;
  let text = `N = ${p.n}, R = ${p.r}, C = ${p.c}; ${mode}; ${fit.passes} passes`;
  if (fit.diagnostics) text += `; Υ̂ = ${fmt(fit.diagnostics.upsilon_hat)}`;
  if (fit.warnings.length) text += `<br>warnings: ${fit.warnings.join("; ")}`;
  return `<p>${text}</p>`;
}

function showError(target, e) {
  $(target).innerHTML = `<p class="err">${e.message || e}</p>`;
}

function runSimulation() {
  try {
    const out = JSON.parse(
      simulate_and_fit(
        num("rows"), num("cols"), num("fill"), num("p"),
        num("sa"), num("sb"), num("se"),
        $("dist").value, num("seed"), $("mode").value,
      ),
    );
    $("sim-out").innerHTML =
      summary(out.fit) +
      coefTable(out.fit, out.truth.beta) +
      componentTable(out.fit, out.truth.vc) +
      `<p>efficiency lower bounds: row GLS ${fmt(out.eff_rls_lb)}, column GLS ${fmt(out.eff_cls_lb)}</p>`;
  } catch (e) {
    showError("sim-out", e);
  }
}

function drawBound() {
  const canvas = $("eb-plot");
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  let curve;
  try {
    curve = JSON.parse(efficiency_bounds(num("eb-e"), num("eb-s"), num("eb-m"), 300));
  } catch (e) {
    $("eb-text").innerHTML = `<span class="err">${e.message || e}</span>`;
    return;
  }
  const pad = 40;
  const w = canvas.width - 2 * pad;
  const h = canvas.height - 2 * pad;
  const xmax = curve.ratio[curve.ratio.length - 1];
  const x = (t) => pad + (t / xmax) * w;
  const y = (v) => pad + (1 - v) * h;

  ctx.strokeStyle = "#999";
  ctx.beginPath();
  ctx.moveTo(pad, pad);
  ctx.lineTo(pad, pad + h);
  ctx.lineTo(pad + w, pad + h);
  ctx.stroke();
  ctx.fillStyle = "#555";
  ctx.font = "12px sans-serif";
  ctx.fillText("1", pad - 14, y(1) + 4);
  ctx.fillText("0", pad - 14, y(0) + 4);
  ctx.fillText(fmt(xmax), pad + w - 20, pad + h + 16);
  ctx.fillText("ignored variance × largest group / σ²E", pad + w / 2 - 110, pad + h + 30);

  ctx.strokeStyle = "#2a6";
  ctx.lineWidth = 2;
  ctx.beginPath();
  curve.ratio.forEach((t, k) => (k ? ctx.lineTo(x(t), y(curve.bound[k])) : ctx.moveTo(x(t), y(curve.bound[k]))));
  ctx.stroke();
  ctx.lineWidth = 1;

  ctx.fillStyle = "#c33";
  ctx.beginPath();
  ctx.arc(x(curve.at), y(curve.value), 5, 0, 2 * Math.PI);
  ctx.fill();
  $("eb-text").textContent = `ratio ${fmt(curve.at)}: efficiency at least ${fmt(curve.value)}`;
}

function runCsv() {
  try {
    const fit = JSON.parse(fit_csv($("csv").value, $("mode").value, $("dedup").value));
    $("csv-out").innerHTML = summary(fit) + coefTable(fit, null) + componentTable(fit, null);
  } catch (e) {
    showError("csv-out", e);
  }
}

await init();
$("status").textContent = "Ready. Everything runs locally in the page.";
$("run").addEventListener("click", runSimulation);
$("fit-csv").addEventListener("click", runCsv);
for (const id of ["eb-e", "eb-s", "eb-m"]) $(id).addEventListener("input", drawBound);
drawBound();
runSimulation();
