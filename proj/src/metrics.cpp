#include "pva/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>

namespace pva::metrics {

using nlohmann::json;

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

void check_pair(const Mask& pred, const Mask& gt) {
  if (!(pred.dims() == gt.dims()))
    throw ValidationError("prediction dims " + to_string(pred.dims()) + " do not match gt dims " +
                          to_string(gt.dims()));
  if (pred.role() != Role::mask || gt.role() != Role::mask)
    throw ValidationError("metrics expect binary mask volumes");
}

double tolerance_for(double tolerance_mm, double r_vox, const Spacing& spacing, bool radius_mode) {
  return radius_mode ? std::max(tolerance_mm, r_vox * spacing.mean()) : tolerance_mm;
}

/// 1D squared distance transform over samples at positions i*step.
void edt_1d(const double* f, double* d, int n, double step, std::vector<int>& v,
            std::vector<double>& z) {
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    const double xq = q * step;
    while (k >= 0) {
      const double xv = v[static_cast<std::size_t>(k)] * step;
      const double s = ((f[q] + xq * xq) - (f[v[static_cast<std::size_t>(k)]] + xv * xv)) /
                       (2.0 * (xq - xv));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        break;
      }
    }
    ++k;
    v[static_cast<std::size_t>(k)] = q;
    z[static_cast<std::size_t>(k)] = k == 0 ? -kInf : z[static_cast<std::size_t>(k)];
    if (k > 0) {
      const int p = v[static_cast<std::size_t>(k) - 1];
      const double xp = p * step;
      z[static_cast<std::size_t>(k)] = ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp));
    }
    z[static_cast<std::size_t>(k) + 1] = kInf;
  }
  if (k < 0) {
    std::fill(d, d + n, kInf);
    return;
  }
  int j = 0;
  for (int q = 0; q < n; ++q) {
    const double x = q * step;
    while (z[static_cast<std::size_t>(j) + 1] < x) ++j;
    const int p = v[static_cast<std::size_t>(j)];
    const double dx = x - p * step;
    d[q] = dx * dx + f[p];
  }
}

}  // namespace

json to_json(const MetricConfig& c) {
  return json{{"centerline_tolerance_vox", c.centerline_tolerance_vox},
              {"rdice_tolerance_vox", c.rdice_tolerance_vox},
              {"radius_tolerance", c.radius_tolerance}};
}

MetricConfig metric_config_from_json(const json& j, MetricConfig c) {
  try {
    c.centerline_tolerance_vox = j.value("centerline_tolerance_vox", c.centerline_tolerance_vox);
    c.rdice_tolerance_vox = j.value("rdice_tolerance_vox", c.rdice_tolerance_vox);
    c.radius_tolerance = j.value("radius_tolerance", c.radius_tolerance);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed metric config: ") + e.what());
  }
  if (!(c.centerline_tolerance_vox > 0.0) || !(c.rdice_tolerance_vox >= 0.0))
    throw ConfigError("metric tolerances must be positive");
  return c;
}

double dice(const Mask& pred, const Mask& gt) {
  check_pair(pred, gt);
  std::size_t p = 0, g = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    p += pred[i];
    g += gt[i];
    both += pred[i] & gt[i];
  }
  if (p + g == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(p + g);
}

std::vector<double> distance_transform(const Mask& mask) {
  const Dims dims = mask.dims();
  std::vector<double> f(dims.voxels());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = mask[i] ? 0.0 : kInf;

  const int extent[3] = {dims.h, dims.w, dims.d};
  std::vector<double> line, out;
  std::vector<int> v;
  std::vector<double> z;
  for (int axis = 0; axis < 3; ++axis) {
    const int n = extent[axis];
    line.resize(static_cast<std::size_t>(n));
    out.resize(static_cast<std::size_t>(n));
    const int a1 = (axis + 1) % 3, a2 = (axis + 2) % 3;
    for (int i1 = 0; i1 < extent[a1]; ++i1)
      for (int i2 = 0; i2 < extent[a2]; ++i2) {
        int pos[3];
        pos[a1] = i1;
        pos[a2] = i2;
        for (int q = 0; q < n; ++q) {
          pos[axis] = q;
          line[static_cast<std::size_t>(q)] = f[dims.index(pos[0], pos[1], pos[2])];
        }
        edt_1d(line.data(), out.data(), n, mask.spacing()[axis], v, z);
        for (int q = 0; q < n; ++q) {
          pos[axis] = q;
          f[dims.index(pos[0], pos[1], pos[2])] = out[static_cast<std::size_t>(q)];
        }
      }
  }
  for (auto& x : f) x = std::sqrt(x);
  return f;
}

double rdice(const Mask& pred, const Mask& gt, double tolerance_mm) {
  check_pair(pred, gt);
  if (!(tolerance_mm >= 0.0)) throw ValidationError("rdice tolerance must be non-negative");
  const std::vector<double> dist = distance_transform(gt);
  Mask::Array kept = pred.data();
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (kept[static_cast<Eigen::Index>(i)] && dist[i] > tolerance_mm) kept[static_cast<Eigen::Index>(i)] = 0;
  return dice(Mask(pred.dims(), pred.spacing(), Role::mask, std::move(kept)), gt);
}

// ---------------------------------------------------------------------------
// Thinning

namespace {

struct CubeTopology {
  std::array<std::vector<int>, 27> adj26;
  std::array<std::vector<int>, 27> adj6;
  std::array<bool, 27> in_n18{};
  std::array<bool, 27> face{};
};

const CubeTopology& cube_topology() {
  static const CubeTopology topo = [] {
    CubeTopology t;
    auto coord = [](int i) { return std::array<int, 3>{i / 9 - 1, (i / 3) % 3 - 1, i % 3 - 1}; };
    for (int i = 0; i < 27; ++i) {
      const auto a = coord(i);
      const int l1 = std::abs(a[0]) + std::abs(a[1]) + std::abs(a[2]);
      t.in_n18[static_cast<std::size_t>(i)] = i != 13 && l1 <= 2;
      t.face[static_cast<std::size_t>(i)] = l1 == 1;
      for (int j = 0; j < 27; ++j) {
        if (i == j) continue;
        const auto b = coord(j);
        const int dh = std::abs(a[0] - b[0]), dw = std::abs(a[1] - b[1]), dd = std::abs(a[2] - b[2]);
        if (std::max({dh, dw, dd}) == 1) t.adj26[static_cast<std::size_t>(i)].push_back(j);
        if (dh + dw + dd == 1) t.adj6[static_cast<std::size_t>(i)].push_back(j);
      }
    }
    return t;
  }();
  return topo;
}

/// Components of `member` cells (centre excluded) under `adj`; when
/// `seed_face` is set, only components touching a face neighbour count.
int count_components(const std::array<bool, 27>& member,
                     const std::array<std::vector<int>, 27>& adj, bool seed_face) {
  const auto& topo = cube_topology();
  std::array<bool, 27> seen{};
  int count = 0;
  int stack[27];
  for (int s = 0; s < 27; ++s) {
    if (!member[static_cast<std::size_t>(s)] || seen[static_cast<std::size_t>(s)]) continue;
    if (seed_face && !topo.face[static_cast<std::size_t>(s)]) continue;
    ++count;
    int top = 0;
    stack[top++] = s;
    seen[static_cast<std::size_t>(s)] = true;
    while (top > 0) {
      const int c = stack[--top];
      for (int n : adj[static_cast<std::size_t>(c)])
        if (member[static_cast<std::size_t>(n)] && !seen[static_cast<std::size_t>(n)]) {
          seen[static_cast<std::size_t>(n)] = true;
          stack[top++] = n;
        }
    }
  }
  return count;
}

std::array<bool, 27> load_cube(const Mask::Array& img, const Dims& dims, int h, int w, int d) {
  std::array<bool, 27> cube{};
  int k = 0;
  for (int dh = -1; dh <= 1; ++dh)
    for (int dw = -1; dw <= 1; ++dw)
      for (int dd = -1; dd <= 1; ++dd, ++k) {
        const int nh = h + dh, nw = w + dw, nd = d + dd;
        cube[static_cast<std::size_t>(k)] =
            dims.contains(nh, nw, nd) && img[static_cast<Eigen::Index>(dims.index(nh, nw, nd))] != 0;
      }
  return cube;
}

int neighbour_count(const std::array<bool, 27>& cube) {
  int n = 0;
  for (int i = 0; i < 27; ++i)
    if (i != 13 && cube[static_cast<std::size_t>(i)]) ++n;
  return n;
}

}  // namespace

bool is_simple(const std::array<bool, 27>& cube) {
  const auto& topo = cube_topology();
  std::array<bool, 27> fg{}, bg{};
  for (int i = 0; i < 27; ++i) {
    if (i == 13) continue;
    fg[static_cast<std::size_t>(i)] = cube[static_cast<std::size_t>(i)];
    bg[static_cast<std::size_t>(i)] = !cube[static_cast<std::size_t>(i)] && topo.in_n18[static_cast<std::size_t>(i)];
  }
  if (count_components(fg, topo.adj26, false) != 1) return false;
  return count_components(bg, topo.adj6, true) == 1;
}

Mask skeletonize(const Mask& mask) {
  if (mask.role() != Role::mask) throw ValidationError("skeletonize expects a mask");
  const Dims dims = mask.dims();
  Mask::Array img = mask.data();
  // Face directions: (dh, dw, dd) of the background neighbour that makes a
  // voxel a border point for the subiteration.
  const int dirs[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  std::vector<std::array<int, 3>> candidates;
  bool changed = true;
  while (changed) {
    changed = false;
    for (const auto& dir : dirs) {
      candidates.clear();
      for (int h = 0; h < dims.h; ++h)
        for (int w = 0; w < dims.w; ++w)
          for (int d = 0; d < dims.d; ++d) {
            if (img[static_cast<Eigen::Index>(dims.index(h, w, d))] == 0) continue;
            const int nh = h + dir[0], nw = w + dir[1], nd = d + dir[2];
            if (dims.contains(nh, nw, nd) && img[static_cast<Eigen::Index>(dims.index(nh, nw, nd))] != 0)
              continue;
            const auto cube = load_cube(img, dims, h, w, d);
            if (neighbour_count(cube) <= 1) continue;  // curve end point
            if (is_simple(cube)) candidates.push_back({h, w, d});
          }
      // Visit candidates from the exposed side inward.
      if (dir[0] + dir[1] + dir[2] > 0) std::reverse(candidates.begin(), candidates.end());
      for (const auto& c : candidates) {
        const auto cube = load_cube(img, dims, c[0], c[1], c[2]);
        if (neighbour_count(cube) <= 1 || !is_simple(cube)) continue;
        img[static_cast<Eigen::Index>(dims.index(c[0], c[1], c[2]))] = 0;
        changed = true;
      }
    }
  }
  return Mask(dims, mask.spacing(), Role::mask, std::move(img));
}

// ---------------------------------------------------------------------------
// Centerline metrics

std::vector<CenterlinePoint> tree_centerline(const CenterlineTree& tree, double step) {
  std::vector<CenterlinePoint> out;
  const auto& root = tree.nodes.at(static_cast<std::size_t>(tree.root));
  out.push_back({root.p, root.r});
  for (const auto& [ia, ib] : tree.edges) {
    const auto& a = tree.nodes[static_cast<std::size_t>(ia)];
    const auto& b = tree.nodes[static_cast<std::size_t>(ib)];
    const double len = (b.p - a.p).norm();
    const int pieces = std::max(1, static_cast<int>(std::ceil(len / step - 1e-9)));
    for (int s = 1; s <= pieces; ++s) {
      const double t = static_cast<double>(s) / pieces;
      out.push_back({a.p + t * (b.p - a.p), a.r + t * (b.r - a.r)});
    }
  }
  return out;
}

double distance_to_mask(const Mask& mask, const Eigen::Vector3d& p, double max_mm) {
  const Dims dims = mask.dims();
  const Spacing& sp = mask.spacing();
  int lo[3], hi[3];
  const int extent[3] = {dims.h, dims.w, dims.d};
  for (int k = 0; k < 3; ++k) {
    lo[k] = std::max(0, static_cast<int>(std::floor(p[k] - max_mm / sp[k])));
    hi[k] = std::min(extent[k] - 1, static_cast<int>(std::ceil(p[k] + max_mm / sp[k])));
  }
  double best2 = kInf;
  for (int h = lo[0]; h <= hi[0]; ++h)
    for (int w = lo[1]; w <= hi[1]; ++w)
      for (int d = lo[2]; d <= hi[2]; ++d) {
        if (mask(h, w, d) == 0) continue;
        const double dh = (h - p[0]) * sp[0], dw = (w - p[1]) * sp[1], dd = (d - p[2]) * sp[2];
        best2 = std::min(best2, dh * dh + dw * dw + dd * dd);
      }
  const double best = std::sqrt(best2);
  return best <= max_mm ? best : kInf;
}

double ov_with_skeleton(const Mask& skel, const CenterlineTree& tree, double tolerance_mm,
                        bool radius_tolerance) {
  if (!(tolerance_mm > 0.0)) throw ValidationError("OV tolerance must be positive");
  const Spacing& sp = skel.spacing();
  std::size_t tpa = 0, fna = 0, tpb = 0, fpb = 0;
  for (const auto& pt : tree_centerline(tree)) {
    const double tol = tolerance_for(tolerance_mm, pt.r, sp, radius_tolerance);
    if (distance_to_mask(skel, pt.p, tol) <= tol)
      ++tpa;
    else
      ++fna;
  }
  // Segments in millimetres for the reverse direction.
  std::vector<std::array<Eigen::Vector3d, 2>> segs;
  std::vector<std::array<double, 2>> radii;
  for (const auto& [ia, ib] : tree.edges) {
    const auto& a = tree.nodes[static_cast<std::size_t>(ia)];
    const auto& b = tree.nodes[static_cast<std::size_t>(ib)];
    segs.push_back({a.p.cwiseProduct(sp), b.p.cwiseProduct(sp)});
    radii.push_back({a.r, b.r});
  }
  const Dims dims = skel.dims();
  for (int h = 0; h < dims.h; ++h)
    for (int w = 0; w < dims.w; ++w)
      for (int d = 0; d < dims.d; ++d) {
        if (skel(h, w, d) == 0) continue;
        const Eigen::Vector3d q = Eigen::Vector3d(h, w, d).cwiseProduct(sp);
        bool hit = false;
        for (std::size_t e = 0; e < segs.size() && !hit; ++e) {
          const auto [dist, t] = segment_distance(q, segs[e][0], segs[e][1]);
          const double r = radii[e][0] + t * (radii[e][1] - radii[e][0]);
          hit = dist <= tolerance_for(tolerance_mm, r, sp, radius_tolerance);
        }
        if (hit)
          ++tpb;
        else
          ++fpb;
      }
  const std::size_t denom = tpa + tpb + fna + fpb;
  return denom == 0 ? 0.0 : static_cast<double>(tpa + tpb) / static_cast<double>(denom);
}

double ov(const Mask& pred, const CenterlineTree& gt_tree, double tolerance_mm,
          bool radius_tolerance) {
  return ov_with_skeleton(skeletonize(pred), gt_tree, tolerance_mm, radius_tolerance);
}

MatchedCenterline match_branch(const Mask& pred, const CenterlineTree& tree,
                               const std::string& branch, double tolerance_mm,
                               bool radius_tolerance) {
  const auto it = tree.branches.find(branch);
  if (it == tree.branches.end()) throw ValidationError("unknown branch '" + branch + "'");
  if (!(tolerance_mm > 0.0)) throw ValidationError("OF tolerance must be positive");
  MatchedCenterline out;
  out.branch = branch;
  out.tolerance_mm = tolerance_mm;
  for (const auto& s : resample_path(tree, it->second, 1.0)) {
    out.points.push_back({s.p, s.r});
    const double tol = tolerance_for(tolerance_mm, s.r, pred.spacing(), radius_tolerance);
    out.matched.push_back(distance_to_mask(pred, s.p, tol) <= tol);
  }
  return out;
}

double of_per_branch(const Mask& pred, const CenterlineTree& tree, const std::string& branch,
                     double tolerance_mm, bool radius_tolerance) {
  const auto m = match_branch(pred, tree, branch, tolerance_mm, radius_tolerance);
  if (m.points.empty()) return 1.0;
  const auto first_miss = std::find(m.matched.begin(), m.matched.end(), false);
  return static_cast<double>(first_miss - m.matched.begin()) / static_cast<double>(m.points.size());
}

// ---------------------------------------------------------------------------
// Reports

double VolumeMetrics::of_mean() const {
  if (of.empty()) return 0.0;
  double s = 0.0;
  for (const auto& [name, v] : of) s += v;
  return s / static_cast<double>(of.size());
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  if (values.empty()) return a;
  for (double v : values) a.mean += v;
  a.mean /= static_cast<double>(values.size());
  for (double v : values) a.std += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(a.std / static_cast<double>(values.size()));
  return a;
}

VolumeMetrics evaluate_volume(const EvalCase& c, const MetricConfig& config) {
  VolumeMetrics m;
  m.id = c.id;
  const double unit = c.gt->spacing().mean();
  m.dice = dice(*c.pred, *c.gt);
  m.rdice = rdice(*c.pred, *c.gt, config.rdice_tolerance_vox * unit);
  const double tol = config.centerline_tolerance_vox * unit;
  m.ov = ov(*c.pred, *c.tree, tol, config.radius_tolerance);
  for (const auto& [name, ids] : c.tree->branches)
    m.of[name] = of_per_branch(*c.pred, *c.tree, name, tol, config.radius_tolerance);
  return m;
}

MetricReport summarize(std::vector<VolumeMetrics> per_volume) {
  MetricReport r;
  r.per_volume = std::move(per_volume);
  std::map<std::string, std::vector<double>> columns;
  for (const auto& m : r.per_volume) {
    columns["dice"].push_back(m.dice);
    columns["rdice"].push_back(m.rdice);
    columns["ov"].push_back(m.ov);
    for (const auto& [name, v] : m.of) columns["of_" + name].push_back(v);
    columns["of_mean"].push_back(m.of_mean());
  }
  for (const auto& [name, values] : columns) r.aggregate[name] = aggregate(values);
  return r;
}

MetricReport evaluate(const std::vector<EvalCase>& cases, const MetricConfig& config) {
  std::vector<VolumeMetrics> per_volume;
  for (const auto& c : cases) per_volume.push_back(evaluate_volume(c, config));
  return summarize(std::move(per_volume));
}

json MetricReport::to_json() const {
  json volumes = json::array();
  for (const auto& m : per_volume) {
    json of = json::object();
    for (const auto& [name, v] : m.of) of[name] = v;
    volumes.push_back({{"id", m.id}, {"dice", m.dice}, {"rdice", m.rdice}, {"ov", m.ov}, {"of", of}});
  }
  json agg = json::object();
  for (const auto& [name, a] : aggregate) agg[name] = {{"mean", a.mean}, {"std", a.std}};
  return json{{"per_volume", volumes}, {"aggregate", agg}};
}

std::string MetricReport::to_csv() const {
  std::vector<std::string> branches;
  for (const auto& m : per_volume)
    for (const auto& [name, v] : m.of)
      if (std::find(branches.begin(), branches.end(), name) == branches.end()) branches.push_back(name);
  std::ostringstream out;
  out << "id,dice,rdice,ov";
  for (const auto& b : branches) out << ",of_" << b;
  out << '\n';
  char buf[32];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return std::string(buf);
  };
  for (const auto& m : per_volume) {
    out << m.id << ',' << num(m.dice) << ',' << num(m.rdice) << ',' << num(m.ov);
    for (const auto& b : branches) {
      const auto it = m.of.find(b);
      out << ',' << (it == m.of.end() ? std::string() : num(it->second));
    }
    out << '\n';
  }
  return out.str();
}

}  // namespace pva::metrics
