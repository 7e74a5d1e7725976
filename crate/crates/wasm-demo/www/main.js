import init, { render_shape, shape_cloud, fps_order, margin_curve } from "./pkg/pvfuse_wasm.js";

const $ = (id) => document.getElementById(id);
const fail = (e) => { $("error").textContent = String(e); };

function drawViews() {
  const m = +$("v-count").value, r = +$("v-res").value;
  const data = render_shape($("v-shape").value, m, r, BigInt($("v-seed").value));
  const host = $("views");
  host.replaceChildren();
  for (let v = 0; v < m; v++) {
    const c = document.createElement("canvas");
    c.width = r; c.height = r;
    c.title = `${(360 / m) * v}°`;
    const ctx = c.getContext("2d");
    const img = ctx.createImageData(r, r);
    for (let i = 0; i < r * r; i++) {
      const g = Math.round(255 * data[v * r * r + i]);
      img.data.set([g, g, g, 255], 4 * i);
    }
    ctx.putImageData(img, 0, 0);
    host.appendChild(c);
  }
}

let cloud = null, cloudShape = null;

function drawFps() {
  const shape = $("f-shape").value;
  if (shape !== cloudShape) {
    cloud = shape_cloud(shape, 1024, 0n);
    cloudShape = shape;
  }
  const k = +$("f-k").value;
  $("f-k-out").textContent = k;
  const keep = fps_order(cloud, k);
  const c = $("fps"), ctx = c.getContext("2d");
  ctx.clearRect(0, 0, c.width, c.height);
  // Oblique projection: x across, z up, y as depth.
  const px = (i) => [c.width / 2 + 170 * (cloud[3 * i] + 0.35 * cloud[3 * i + 1]),
                     c.height / 2 - 170 * (cloud[3 * i + 2] + 0.35 * cloud[3 * i + 1])];
  ctx.fillStyle = "#bbb";
  for (let i = 0; i < cloud.length / 3; i++) { const [x, y] = px(i); ctx.fillRect(x - 1, y - 1, 2, 2); }
  ctx.fillStyle = "#c22";
  for (const i of keep) { const [x, y] = px(i); ctx.fillRect(x - 2.5, y - 2.5, 5, 5); }
}

function drawArc() {
  const ct = +$("a-ct").value, co = +$("a-co").value, s = +$("a-s").value;
  $("a-ct-out").textContent = ct; $("a-co-out").textContent = co; $("a-s-out").textContent = s;
  const margins = Float64Array.from({ length: 101 }, (_, i) => (i / 100) * 1.0);
  const loss = margin_curve(ct, co, s, margins);
  const c = $("arc"), ctx = c.getContext("2d");
  const pad = 30, w = c.width - 2 * pad, h = c.height - 2 * pad;
  const top = Math.max(...loss, 1e-12);
  ctx.clearRect(0, 0, c.width, c.height);
  ctx.strokeStyle = "#888";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#444";
  ctx.fillText("margin 0", pad, c.height - 10);
  ctx.fillText("1.0 rad", pad + w - 36, c.height - 10);
  ctx.fillText(`loss max ${top.toPrecision(4)}`, pad + 4, pad - 8);
  ctx.strokeStyle = "#26c";
  ctx.beginPath();
  loss.forEach((v, i) => {
    const x = pad + (i / (loss.length - 1)) * w, y = pad + h - (v / top) * h;
    i ? ctx.lineTo(x, y) : ctx.moveTo(x, y);
  });
  ctx.stroke();
}

const guard = (f) => () => { try { $("error").textContent = ""; f(); } catch (e) { fail(e); } };

init().then(() => {
  $("v-go").onclick = guard(drawViews);
  for (const id of ["f-shape", "f-k"]) $(id).oninput = guard(drawFps);
  for (const id of ["a-ct", "a-co", "a-s"]) $(id).oninput = guard(drawArc);
  guard(drawViews)(); guard(drawFps)(); guard(drawArc)();
}).catch(fail);
