#include "pva/phantom.hpp"

#include "pva/topology.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <queue>
#include <random>
#include <set>

namespace pva {

using nlohmann::json;

// ---------------------------------------------------------------------------
// CenterlineTree

std::vector<int> CenterlineTree::parents() const {
  std::vector<int> parent(nodes.size(), -1);
  for (const auto& [a, b] : edges) parent[static_cast<std::size_t>(b)] = a;
  return parent;
}

std::vector<std::vector<int>> CenterlineTree::children() const {
  std::vector<std::vector<int>> out(nodes.size());
  for (const auto& [a, b] : edges) out[static_cast<std::size_t>(a)].push_back(b);
  return out;
}

void CenterlineTree::validate(const Dims& dims) const {
  const int n = static_cast<int>(nodes.size());
  if (n == 0) throw ValidationError("centerline tree has no nodes");
  if (root < 0 || root >= n) throw ValidationError("centerline tree root out of range");
  if (static_cast<int>(edges.size()) != n - 1)
    throw ValidationError("centerline tree must have exactly nodes-1 edges");
  std::vector<int> indegree(nodes.size(), 0);
  for (const auto& [a, b] : edges) {
    if (a < 0 || b < 0 || a >= n || b >= n || a == b)
      throw ValidationError("centerline edge references an invalid node");
    ++indegree[static_cast<std::size_t>(b)];
  }
  if (indegree[static_cast<std::size_t>(root)] != 0)
    throw ValidationError("centerline root has a parent");
  for (int i = 0; i < n; ++i)
    if (i != root && indegree[static_cast<std::size_t>(i)] != 1)
      throw ValidationError("centerline node " + std::to_string(i) + " does not have one parent");
  // n-1 edges, one parent each: the graph is a tree iff everything is reachable.
  const auto kids = children();
  std::vector<char> seen(nodes.size(), 0);
  std::vector<int> stack{root};
  int reached = 0;
  while (!stack.empty()) {
    const int v = stack.back();
    stack.pop_back();
    if (seen[static_cast<std::size_t>(v)]) throw ValidationError("centerline graph has a cycle");
    seen[static_cast<std::size_t>(v)] = 1;
    ++reached;
    for (int c : kids[static_cast<std::size_t>(v)]) stack.push_back(c);
  }
  if (reached != n) throw ValidationError("centerline graph is not connected");

  for (const auto& node : nodes) {
    if (!(node.r > 0.0)) throw ValidationError("centerline radius must be positive");
    const Eigen::Vector3d hi(dims.h - 1, dims.w - 1, dims.d - 1);
    if ((node.p.array() < 0.0).any() || (node.p.array() > hi.array()).any())
      throw ValidationError("centerline node lies outside the volume");
  }
  const auto parent = parents();
  for (const auto& [name, ids] : branches) {
    if (ids.empty()) throw ValidationError("branch '" + name + "' is empty");
    for (std::size_t k = 1; k < ids.size(); ++k)
      if (parent[static_cast<std::size_t>(ids[k])] != ids[k - 1])
        throw ValidationError("branch '" + name + "' is not a root-to-leaf path");
  }
}

json to_json(const CenterlineTree& tree) {
  json nodes = json::array();
  for (const auto& n : tree.nodes) nodes.push_back({{"p", {n.p[0], n.p[1], n.p[2]}}, {"r", n.r}});
  json edges = json::array();
  for (const auto& [a, b] : tree.edges) edges.push_back({a, b});
  json branches = json::object();
  for (const auto& [name, ids] : tree.branches) branches[name] = ids;
  return json{{"nodes", nodes}, {"edges", edges}, {"branches", branches}};
}

CenterlineTree tree_from_json(const json& j) {
  CenterlineTree tree;
  try {
    for (const auto& n : j.at("nodes")) {
      const auto& p = n.at("p");
      tree.nodes.push_back(
          {Eigen::Vector3d(p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()),
           n.at("r").get<double>()});
    }
    for (const auto& e : j.at("edges")) tree.edges.emplace_back(e.at(0).get<int>(), e.at(1).get<int>());
    for (const auto& [name, ids] : j.at("branches").items())
      tree.branches[name] = ids.get<std::vector<int>>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed centerline tree: ") + e.what());
  }
  std::vector<char> is_child(tree.nodes.size(), 0);
  for (const auto& [a, b] : tree.edges)
    if (b >= 0 && static_cast<std::size_t>(b) < is_child.size()) is_child[static_cast<std::size_t>(b)] = 1;
  const auto it = std::find(is_child.begin(), is_child.end(), 0);
  tree.root = it == is_child.end() ? 0 : static_cast<int>(it - is_child.begin());
  return tree;
}

void write_tree(const CenterlineTree& tree, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << to_json(tree).dump(1) << '\n';
}

CenterlineTree read_tree(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(std::string("centerline tree is not valid JSON: ") + e.what());
  }
  return tree_from_json(j);
}

std::pair<double, double> segment_distance(const Eigen::Vector3d& q, const Eigen::Vector3d& a,
                                           const Eigen::Vector3d& b) {
  const Eigen::Vector3d ab = b - a;
  const double len2 = ab.squaredNorm();
  double t = len2 > 0.0 ? (q - a).dot(ab) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return {(q - (a + t * ab)).norm(), t};
}

std::vector<PathSample> resample_path(const CenterlineTree& tree, const std::vector<int>& node_ids,
                                      double step) {
  std::vector<PathSample> out;
  if (node_ids.empty()) return out;
  const auto& first = tree.nodes.at(static_cast<std::size_t>(node_ids.front()));
  out.push_back({first.p, first.r});
  for (std::size_t k = 1; k < node_ids.size(); ++k) {
    const auto& a = tree.nodes.at(static_cast<std::size_t>(node_ids[k - 1]));
    const auto& b = tree.nodes.at(static_cast<std::size_t>(node_ids[k]));
    const double len = (b.p - a.p).norm();
    const int pieces = std::max(1, static_cast<int>(std::ceil(len / step - 1e-9)));
    for (int s = 1; s <= pieces; ++s) {
      const double t = static_cast<double>(s) / pieces;
      out.push_back({a.p + t * (b.p - a.p), a.r + t * (b.r - a.r)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// PhantomSpec

void PhantomSpec::validate() const {
  if (!dims.positive() || dims.h < 8 || dims.w < 8 || dims.d < 8)
    throw ValidationError("phantom dims must be at least 8 voxels per axis");
  if (!(spacing.array() > 0.0).all()) throw ValidationError("phantom spacing must be positive");
  if (n_main_branches < 1) throw ValidationError("phantom needs at least one main branch");
  if (bifurcation_depth < 0 || bifurcation_depth > 4)
    throw ValidationError("bifurcation depth must be in [0, 4]");
  if (!(tortuosity >= 0.0)) throw ValidationError("tortuosity must be non-negative");
  if (!(r_min_mm > 0.0) || !(r_max_mm >= r_min_mm))
    throw ValidationError("radius range must satisfy 0 < r_min <= r_max");
  if (r_max_vox() * 4.0 > std::min({dims.h, dims.w, dims.d}))
    throw ValidationError("maximum radius too large for the phantom dims");
  if (!(noise_std >= 0.0)) throw ValidationError("noise std must be non-negative");
  if (!(blur_sigma >= 0.0)) throw ValidationError("blur sigma must be non-negative");
  if (!std::isfinite(background_mean) || !std::isfinite(foreground_mean))
    throw ValidationError("intensity means must be finite");
}

json to_json(const PhantomSpec& s) {
  return json{{"dims", {s.dims.h, s.dims.w, s.dims.d}},
              {"spacing", {s.spacing[0], s.spacing[1], s.spacing[2]}},
              {"n_main_branches", s.n_main_branches},
              {"bifurcation_depth", s.bifurcation_depth},
              {"tortuosity", s.tortuosity},
              {"r_min_mm", s.r_min_mm},
              {"r_max_mm", s.r_max_mm},
              {"background_mean", s.background_mean},
              {"foreground_mean", s.foreground_mean},
              {"noise_std", s.noise_std},
              {"blur_sigma", s.blur_sigma},
              {"rng_seed", s.rng_seed}};
}

PhantomSpec phantom_spec_from_json(const json& j, PhantomSpec s) {
  try {
    if (j.contains("dims")) {
      const auto& d = j.at("dims");
      s.dims = {d.at(0).get<int>(), d.at(1).get<int>(), d.at(2).get<int>()};
    }
    if (j.contains("spacing")) {
      const auto& d = j.at("spacing");
      s.spacing = {d.at(0).get<double>(), d.at(1).get<double>(), d.at(2).get<double>()};
    }
    s.n_main_branches = j.value("n_main_branches", s.n_main_branches);
    s.bifurcation_depth = j.value("bifurcation_depth", s.bifurcation_depth);
    s.tortuosity = j.value("tortuosity", s.tortuosity);
    s.r_min_mm = j.value("r_min_mm", s.r_min_mm);
    s.r_max_mm = j.value("r_max_mm", s.r_max_mm);
    s.background_mean = j.value("background_mean", s.background_mean);
    s.foreground_mean = j.value("foreground_mean", s.foreground_mean);
    s.noise_std = j.value("noise_std", s.noise_std);
    s.blur_sigma = j.value("blur_sigma", s.blur_sigma);
    s.rng_seed = j.value("rng_seed", s.rng_seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed phantom spec: ") + e.what());
  }
  return s;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  // splitmix64 finalizer over a golden-ratio stride.
  std::uint64_t z = base + 0x9E3779B97F4A7C15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Tree growth

namespace {

constexpr double kStep = 2.0;
constexpr double kMargin = 2.0;
constexpr int kMaxRetries = 24;

const char* const kMainNames[] = {"LAD", "LCX", "RCA"};

std::string main_branch_name(int i) {
  if (i < 3) return kMainNames[i];
  return "M" + std::to_string(i);
}

class TreeGrower {
 public:
  TreeGrower(const PhantomSpec& spec, std::mt19937_64& rng, CenterlineTree& tree)
      : spec_(spec), rng_(rng), tree_(tree) {
    lo_ = Eigen::Vector3d::Constant(kMargin);
    hi_ = Eigen::Vector3d(spec.dims.h - 1, spec.dims.w - 1, spec.dims.d - 1).array() - kMargin;
    centre_ = 0.5 * (lo_ + hi_);
  }

  bool inside(const Eigen::Vector3d& p) const {
    return (p.array() >= lo_.array()).all() && (p.array() <= hi_.array()).all();
  }

  Eigen::Vector3d gaussian3() {
    std::normal_distribution<double> n(0.0, 1.0);
    const double x = n(rng_), y = n(rng_), z = n(rng_);
    return {x, y, z};
  }

  /// Grows a chain of nodes from `start`; returns the new node ids.
  std::vector<int> grow(int start, Eigen::Vector3d dir, double length, double r_start,
                        double r_end) {
    std::vector<int> ids;
    const int steps = std::max(1, static_cast<int>(std::ceil(length / kStep)));
    Eigen::Vector3d prev = tree_.nodes[static_cast<std::size_t>(start)].p;
    int parent = start;
    dir.normalize();
    for (int k = 1; k <= steps; ++k) {
      bool placed = false;
      Eigen::Vector3d p;
      for (int attempt = 0; attempt < kMaxRetries && !placed; ++attempt) {
        Eigen::Vector3d d = dir;
        if (spec_.tortuosity > 0.0) d += spec_.tortuosity * gaussian3();
        if (attempt > 0) d += 0.25 * attempt * (centre_ - prev).normalized();
        d.normalize();
        p = prev + kStep * d;
        if (inside(p)) {
          placed = true;
          dir = d;
        } else if (spec_.tortuosity == 0.0) {
          break;
        }
      }
      if (!placed) break;
      const double r = r_start + (r_end - r_start) * static_cast<double>(k) / steps;
      tree_.nodes.push_back({p, r});
      const int id = static_cast<int>(tree_.nodes.size()) - 1;
      tree_.edges.emplace_back(parent, id);
      ids.push_back(id);
      parent = id;
      prev = p;
    }
    return ids;
  }

  /// Recursively spawns side branches off `chain` (start node included).
  void spawn_children(const std::vector<int>& chain, double chain_length, int level) {
    if (level >= spec_.bifurcation_depth || chain.size() < 3) return;
    const double r_min = spec_.r_min_vox();
    for (double frac : {0.35, 0.7}) {
      const auto j = static_cast<std::size_t>(std::lround(frac * static_cast<double>(chain.size() - 1)));
      if (j == 0 || j + 1 >= chain.size()) continue;
      const int at = chain[j];
      const Eigen::Vector3d local =
          (tree_.nodes[static_cast<std::size_t>(chain[j + 1])].p -
           tree_.nodes[static_cast<std::size_t>(chain[j - 1])].p)
              .normalized();
      // Random unit vector perpendicular to the local direction.
      Eigen::Vector3d perp = gaussian3();
      perp -= perp.dot(local) * local;
      if (perp.norm() < 1e-9) perp = local.unitOrthogonal();
      perp.normalize();
      std::uniform_real_distribution<double> angle(0.8, 1.1);
      const double a = angle(rng_);
      const Eigen::Vector3d dir = std::cos(a) * local + std::sin(a) * perp;
      const double r0 = std::max(r_min, 0.8 * tree_.nodes[static_cast<std::size_t>(at)].r);
      const double len = 0.5 * chain_length;
      auto ids = grow(at, dir, len, r0, r_min);
      if (ids.empty()) continue;
      std::vector<int> child{at};
      child.insert(child.end(), ids.begin(), ids.end());
      spawn_children(child, len, level + 1);
    }
  }

  const Eigen::Vector3d& centre() const { return centre_; }

 private:
  const PhantomSpec& spec_;
  std::mt19937_64& rng_;
  CenterlineTree& tree_;
  Eigen::Vector3d lo_, hi_, centre_;
};

CenterlineTree grow_tree(const PhantomSpec& spec, std::mt19937_64& rng) {
  CenterlineTree tree;
  TreeGrower grower(spec, rng, tree);
  const double cw = 0.5 * (spec.dims.w - 1), cd = 0.5 * (spec.dims.d - 1);
  tree.nodes.push_back({Eigen::Vector3d(kMargin, cw, cd), spec.r_max_vox()});
  tree.root = 0;

  const double r_max = spec.r_max_vox(), r_min = spec.r_min_vox();
  const double trunk_end_r = r_min;
  const double trunk_len = 0.9 * (spec.dims.h - 1 - 2 * kMargin) *
                           (spec.n_main_branches == 1 ? 1.0 : 1.15);
  std::uniform_real_distribution<double> jitter(-0.3, 0.3);

  std::vector<std::pair<std::vector<int>, double>> trunks;
  for (int i = 0; i < spec.n_main_branches; ++i) {
    std::vector<int> ids;
    for (int attempt = 0; attempt < kMaxRetries && ids.size() < 2; ++attempt) {
      // Roll back a failed attempt.
      if (!ids.empty()) {
        tree.nodes.resize(tree.nodes.size() - ids.size());
        tree.edges.resize(tree.edges.size() - ids.size());
        ids.clear();
      }
      Eigen::Vector3d dir(1.0, 0.0, 0.0);
      if (spec.n_main_branches > 1) {
        const double phi = 2.0 * std::numbers::pi * i / spec.n_main_branches + jitter(rng);
        dir = Eigen::Vector3d(1.0, 0.9 * std::cos(phi), 0.9 * std::sin(phi));
      }
      ids = grower.grow(tree.root, dir, trunk_len, r_max, trunk_end_r);
    }
    if (ids.size() < 2)
      throw GenerationError("main branch " + std::to_string(i) + " escaped the volume bounds");
    std::vector<int> chain{tree.root};
    chain.insert(chain.end(), ids.begin(), ids.end());
    tree.branches[main_branch_name(i)] = chain;
    trunks.emplace_back(chain, trunk_len);
  }
  for (const auto& [chain, len] : trunks) grower.spawn_children(chain, len, 0);
  return tree;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    const double v = std::exp(-0.5 * i * i / (sigma * sigma));
    k[static_cast<std::size_t>(i + radius)] = v;
    sum += v;
  }
  for (auto& v : k) v /= sum;
  return k;
}

/// Separable Gaussian blur with clamp-to-edge boundaries.
Eigen::ArrayXd gaussian_blur(const Eigen::ArrayXd& in, const Dims& dims, double sigma) {
  if (sigma <= 0.0) return in;
  const auto kernel = gaussian_kernel(sigma);
  const int radius = static_cast<int>(kernel.size() / 2);
  Eigen::ArrayXd src = in, dst(in.size());
  const int extent[3] = {dims.h, dims.w, dims.d};
  for (int axis = 0; axis < 3; ++axis) {
    for (int h = 0; h < dims.h; ++h)
      for (int w = 0; w < dims.w; ++w)
        for (int d = 0; d < dims.d; ++d) {
          int pos[3] = {h, w, d};
          const int centre = pos[axis];
          double acc = 0.0;
          for (int k = -radius; k <= radius; ++k) {
            pos[axis] = std::clamp(centre + k, 0, extent[axis] - 1);
            acc += kernel[static_cast<std::size_t>(k + radius)] *
                   src[static_cast<Eigen::Index>(dims.index(pos[0], pos[1], pos[2]))];
          }
          dst[static_cast<Eigen::Index>(dims.index(h, w, d))] = acc;
        }
    std::swap(src, dst);
  }
  return src;
}

struct Box {
  int lo[3];
  int hi[3];
};

Box segment_box(const Eigen::Vector3d& a, const Eigen::Vector3d& b, double pad, const Dims& dims) {
  const int extent[3] = {dims.h, dims.w, dims.d};
  Box box{};
  for (int k = 0; k < 3; ++k) {
    box.lo[k] = std::max(0, static_cast<int>(std::floor(std::min(a[k], b[k]) - pad)));
    box.hi[k] = std::min(extent[k] - 1, static_cast<int>(std::ceil(std::max(a[k], b[k]) + pad)));
  }
  return box;
}

}  // namespace

VolumeF render_occupancy(const CenterlineTree& tree, const Dims& dims, const Spacing& spacing) {
  VolumeF::Array occ = VolumeF::Array::Zero(static_cast<Eigen::Index>(dims.voxels()));
  for (const auto& [ia, ib] : tree.edges) {
    const auto& a = tree.nodes[static_cast<std::size_t>(ia)];
    const auto& b = tree.nodes[static_cast<std::size_t>(ib)];
    const Box box = segment_box(a.p, b.p, std::max(a.r, b.r) + 1.0, dims);
    for (int h = box.lo[0]; h <= box.hi[0]; ++h)
      for (int w = box.lo[1]; w <= box.hi[1]; ++w)
        for (int d = box.lo[2]; d <= box.hi[2]; ++d) {
          const auto [dist, t] = segment_distance(Eigen::Vector3d(h, w, d), a.p, b.p);
          const double r = a.r + t * (b.r - a.r);
          const float v = static_cast<float>(std::clamp(r + 0.5 - dist, 0.0, 1.0));
          auto& cell = occ[static_cast<Eigen::Index>(dims.index(h, w, d))];
          cell = std::max(cell, v);
        }
  }
  return VolumeF(dims, spacing, Role::logit, std::move(occ));
}

Phantom generate_phantom(const PhantomSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.rng_seed);
  CenterlineTree tree = grow_tree(spec, rng);
  tree.validate(spec.dims);

  const VolumeF occupancy = render_occupancy(tree, spec.dims, spec.spacing);
  Mask gt = binarize(occupancy, 0.5);
  const std::size_t fg = count_foreground(gt);
  if (fg == 0 || static_cast<double>(fg) >= 0.2 * static_cast<double>(gt.size()))
    throw GenerationError("phantom vessel fraction outside (0, 20%)");

  const Eigen::ArrayXd blurred =
      gaussian_blur(occupancy.data().cast<double>(), spec.dims, spec.blur_sigma);
  std::normal_distribution<double> noise(0.0, 1.0);
  VolumeF::Array image(blurred.size());
  const double contrast = spec.foreground_mean - spec.background_mean;
  for (Eigen::Index i = 0; i < image.size(); ++i)
    image[i] = static_cast<float>(spec.background_mean + contrast * blurred[i] +
                                  spec.noise_std * noise(rng));
  return {VolumeF(spec.dims, spec.spacing, Role::image, std::move(image)), std::move(gt),
          std::move(tree)};
}

// ---------------------------------------------------------------------------
// PVA synthesis

PvaLabel synthesize_pva(const Mask& gt_mask, const CenterlineTree& tree, double target_fraction,
                        std::uint64_t rng_seed) {
  if (!(target_fraction > 0.0 && target_fraction <= 1.0))
    throw ValidationError("PVA target fraction must lie in (0, 1]");
  gt_mask.validate();
  tree.validate(gt_mask.dims());
  const Dims dims = gt_mask.dims();
  const std::size_t total = count_foreground(gt_mask);
  if (total == 0) throw ValidationError("ground-truth mask is empty");

  // Each vessel voxel belongs to the segment it is deepest inside.
  const std::size_t n_edges = tree.edges.size();
  std::vector<double> best(dims.voxels(), std::numeric_limits<double>::infinity());
  std::vector<int> owner(dims.voxels(), -1);
  std::vector<double> param(dims.voxels(), 0.0);
  for (std::size_t e = 0; e < n_edges; ++e) {
    const auto& a = tree.nodes[static_cast<std::size_t>(tree.edges[e].first)];
    const auto& b = tree.nodes[static_cast<std::size_t>(tree.edges[e].second)];
    const Box box = segment_box(a.p, b.p, std::max(a.r, b.r) + 1.0, dims);
    for (int h = box.lo[0]; h <= box.hi[0]; ++h)
      for (int w = box.lo[1]; w <= box.hi[1]; ++w)
        for (int d = box.lo[2]; d <= box.hi[2]; ++d) {
          const std::size_t i = dims.index(h, w, d);
          if (gt_mask[i] == 0) continue;
          const auto [dist, t] = segment_distance(Eigen::Vector3d(h, w, d), a.p, b.p);
          const double score = dist - (a.r + t * (b.r - a.r));
          if (score < best[i]) {
            best[i] = score;
            owner[i] = static_cast<int>(e);
            param[i] = t;
          }
        }
  }

  // Trunk order: larger proximal radius first, ties broken by the seed.
  std::mt19937_64 rng(rng_seed);
  struct Trunk {
    std::string name;
    std::vector<int> ids;
    double radius;
    std::uint64_t tiebreak;
  };
  std::vector<Trunk> trunks;
  for (const auto& [name, ids] : tree.branches) {
    const double r = tree.nodes[static_cast<std::size_t>(ids.size() > 1 ? ids[1] : ids[0])].r;
    trunks.push_back({name, ids, r, rng()});
  }
  std::sort(trunks.begin(), trunks.end(), [](const Trunk& x, const Trunk& y) {
    if (x.radius != y.radius) return x.radius > y.radius;
    return x.tiebreak < y.tiebreak;
  });

  std::map<std::pair<int, int>, std::size_t> edge_index;
  for (std::size_t e = 0; e < n_edges; ++e) edge_index[tree.edges[e]] = e;

  struct EdgeKey {
    int tier = 2;  // 0 trunk, 1 side branch, 2 unowned
    double s0 = 0.0, len = 0.0;
    int rank = 0;
  };
  std::vector<EdgeKey> edge_key(n_edges);
  std::vector<int> first_edge_of_trunk;
  for (std::size_t r = 0; r < trunks.size(); ++r) {
    double s = 0.0;
    const auto& ids = trunks[r].ids;
    for (std::size_t k = 1; k < ids.size(); ++k) {
      const std::size_t e = edge_index.at({ids[k - 1], ids[k]});
      const double len = (tree.nodes[static_cast<std::size_t>(ids[k])].p -
                          tree.nodes[static_cast<std::size_t>(ids[k - 1])].p)
                             .norm();
      edge_key[e] = {0, s, len, static_cast<int>(r)};
      if (k == 1) first_edge_of_trunk.push_back(static_cast<int>(e));
      s += len;
    }
  }
  // Remaining edges in breadth-first order from the root.
  {
    const auto kids = tree.children();
    std::queue<int> q;
    q.push(tree.root);
    int order = 0;
    while (!q.empty()) {
      const int v = q.front();
      q.pop();
      for (int c : kids[static_cast<std::size_t>(v)]) {
        const std::size_t e = edge_index.at({v, c});
        if (edge_key[e].tier != 0) edge_key[e] = {1, 0.0, 0.0, order++};
        q.push(c);
      }
    }
  }

  struct VoxelKey {
    int tier;
    double primary;
    int rank;
    std::size_t index;
  };
  std::vector<VoxelKey> order;
  order.reserve(total);
  for (std::size_t i = 0; i < dims.voxels(); ++i) {
    if (gt_mask[i] == 0) continue;
    if (owner[i] < 0) {
      order.push_back({2, 0.0, 0, i});
      continue;
    }
    const auto& k = edge_key[static_cast<std::size_t>(owner[i])];
    if (k.tier == 0)
      order.push_back({0, k.s0 + param[i] * k.len, k.rank, i});
    else
      order.push_back({1, static_cast<double>(k.rank) + param[i], 0, i});
  }
  std::sort(order.begin(), order.end(), [](const VoxelKey& x, const VoxelKey& y) {
    if (x.tier != y.tier) return x.tier < y.tier;
    if (x.primary != y.primary) return x.primary < y.primary;
    if (x.rank != y.rank) return x.rank < y.rank;
    return x.index < y.index;
  });

  const auto want = std::clamp<std::size_t>(
      static_cast<std::size_t>(std::llround(target_fraction * static_cast<double>(total))), 1,
      total);
  Mask label(dims, gt_mask.spacing(), Role::mask, std::uint8_t{0});
  for (std::size_t k = 0; k < want; ++k) label[order[k].index] = 1;

  // Keep only labeled components that reach a trunk's proximal segment.
  bool warning = false;
  const Components cc = connected_components(label, 26);
  if (cc.count > 1) {
    std::vector<char> keep(static_cast<std::size_t>(cc.count), 0);
    for (std::size_t i = 0; i < dims.voxels(); ++i) {
      if (label[i] == 0) continue;
      const bool proximal =
          owner[i] >= 0 && std::find(first_edge_of_trunk.begin(), first_edge_of_trunk.end(),
                                     owner[i]) != first_edge_of_trunk.end();
      if (proximal || first_edge_of_trunk.empty()) keep[static_cast<std::size_t>(cc.labels[i])] = 1;
    }
    for (std::size_t i = 0; i < dims.voxels(); ++i)
      if (label[i] != 0 && !keep[static_cast<std::size_t>(cc.labels[i])]) {
        label[i] = 0;
        warning = true;
      }
  }
  const double fraction =
      static_cast<double>(count_foreground(label)) / static_cast<double>(total);
  if (std::abs(fraction - target_fraction) > 0.02) warning = true;
  return PvaLabel(std::move(label), fraction, warning);
}

}  // namespace pva
