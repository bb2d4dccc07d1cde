#pragma once

#include "nnqn/core.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <numbers>
#include <utility>
#include <vector>

namespace nnqn {

using Point = Eigen::Vector2d;

/// Pair of elements sharing an edge, with the shared edge length.
struct ElementEdge {
  int a = 0;
  int b = 0;
  double length = 0.0;
};

/// Linear triangle mesh. Elements are stored counter-clockwise.
struct Mesh {
  std::vector<Point> nodes;
  std::vector<std::array<int, 3>> elements;
  std::vector<std::array<int, 2>> boundary_edges;
  std::vector<std::vector<int>> element_neighbors;
  std::vector<ElementEdge> interior_edges;

  int n_nodes() const { return static_cast<int>(nodes.size()); }
  int n_elements() const { return static_cast<int>(elements.size()); }

  double signed_area(int e) const {
    const auto& t = elements[e];
    const Point& p0 = nodes[t[0]];
    const Point& p1 = nodes[t[1]];
    const Point& p2 = nodes[t[2]];
    return 0.5 * ((p1 - p0).x() * (p2 - p0).y() - (p2 - p0).x() * (p1 - p0).y());
  }
  double area(int e) const { return std::abs(signed_area(e)); }
  Point centroid(int e) const {
    const auto& t = elements[e];
    return (nodes[t[0]] + nodes[t[1]] + nodes[t[2]]) / 3.0;
  }
  double total_area() const {
    double s = 0.0;
    for (int e = 0; e < n_elements(); ++e) s += area(e);
    return s;
  }
  double edge_length(const std::array<int, 2>& ed) const {
    return (nodes[ed[0]] - nodes[ed[1]]).norm();
  }
  /// Mean over elements of the longest edge.
  double mean_element_diameter() const {
    double s = 0.0;
    for (const auto& t : elements) {
      double d = 0.0;
      for (int i = 0; i < 3; ++i) d = std::max(d, (nodes[t[i]] - nodes[t[(i + 1) % 3]]).norm());
      s += d;
    }
    return elements.empty() ? 0.0 : s / static_cast<double>(elements.size());
  }
  /// Largest distance between two boundary nodes.
  double diameter() const {
    double d = 0.0;
    for (const auto& a : boundary_edges)
      for (const auto& b : boundary_edges) d = std::max(d, (nodes[a[0]] - nodes[b[0]]).norm());
    return d;
  }

  /// Rebuilds boundary edges and element adjacency from nodes/elements.
  /// Boundary edges keep the orientation of their owning element, so they
  /// run counter-clockwise around the domain.
  void finalize() {
    for (int e = 0; e < n_elements(); ++e) {
      if (signed_area(e) < 0.0) std::swap(elements[e][1], elements[e][2]);
      if (!(signed_area(e) > 0.0)) throw ConfigError("degenerate triangle in mesh");
    }
    std::map<std::pair<int, int>, std::vector<int>> owners;
    for (int e = 0; e < n_elements(); ++e) {
      const auto& t = elements[e];
      for (int i = 0; i < 3; ++i) {
        int a = t[i], b = t[(i + 1) % 3];
        owners[{std::min(a, b), std::max(a, b)}].push_back(e);
      }
    }
    boundary_edges.clear();
    interior_edges.clear();
    element_neighbors.assign(elements.size(), {});
    for (int e = 0; e < n_elements(); ++e) {
      const auto& t = elements[e];
      for (int i = 0; i < 3; ++i) {
        int a = t[i], b = t[(i + 1) % 3];
        const auto& own = owners.at({std::min(a, b), std::max(a, b)});
        if (own.size() == 1) {
          boundary_edges.push_back({a, b});
        } else if (own.size() == 2) {
          int other = own[0] == e ? own[1] : own[0];
          element_neighbors[e].push_back(other);
          if (e < other) interior_edges.push_back({e, other, (nodes[a] - nodes[b]).norm()});
        } else {
          throw ConfigError("non-manifold edge in mesh");
        }
      }
    }
    for (auto& nb : element_neighbors) std::sort(nb.begin(), nb.end());
  }
};

/// Electrodes as contiguous runs of boundary-edge indices, ordered
/// counter-clockwise around the boundary.
struct ElectrodeLayout {
  std::vector<std::vector<int>> electrodes;
  int n_electrodes() const { return static_cast<int>(electrodes.size()); }
};

struct MeshWithElectrodes {
  Mesh mesh;
  ElectrodeLayout layout;
};

namespace detail {

inline int mesh_add_node(Mesh& m, double x, double y) {
  m.nodes.emplace_back(x, y);
  return m.n_nodes() - 1;
}

// Joins two closed rings of nodes (angles sorted ascending in [0, 2pi))
// with a strip of triangles, advancing along whichever ring has the
// smaller next angle.
inline void stitch_rings(Mesh& m, const std::vector<int>& inner, const std::vector<double>& inner_angle,
                         const std::vector<int>& outer, const std::vector<double>& outer_angle) {
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const int p = static_cast<int>(inner.size());
  const int q = static_cast<int>(outer.size());
  int j0 = 0;
  double best = 1e300;
  for (int j = 0; j < q; ++j) {
    double d = std::remainder(outer_angle[j] - inner_angle[0], two_pi);
    if (std::abs(d) < best - 1e-12) {
      best = std::abs(d);
      j0 = j;
    }
  }
  auto a_at = [&](int i) { return inner_angle[i % p] + two_pi * (i / p); };
  const double b_base = inner_angle[0] + std::remainder(outer_angle[j0] - inner_angle[0], two_pi);
  auto b_at = [&](int j) {
    int jj = (j0 + j) % q;
    double rel = outer_angle[jj] - outer_angle[j0];
    if (rel < -1e-12) rel += two_pi;
    return b_base + rel + two_pi * (j / q);
  };
  int i = 0, j = 0;
  while (i < p || j < q) {
    bool advance_inner;
    if (i == p) advance_inner = false;
    else if (j == q) advance_inner = true;
    else advance_inner = a_at(i + 1) <= b_at(j + 1) + 1e-12;
    int ai = inner[i % p];
    int bj = outer[(j0 + j) % q];
    if (advance_inner) {
      m.elements.push_back({ai, bj, inner[(i + 1) % p]});
      ++i;
    } else {
      m.elements.push_back({ai, bj, outer[(j0 + j + 1) % q]});
      ++j;
    }
  }
}

inline int ring_count(int k, int n_electrodes) {
  int c = static_cast<int>(std::lround(6.0 * k / n_electrodes));
  return n_electrodes * std::max(1, c);
}

struct DiskPlan {
  int rings = 0;
  int per_electrode = 0;
  int per_gap = 0;
  int elements = 0;
};

inline DiskPlan plan_disk(int rings, int n_electrodes, double coverage) {
  DiskPlan plan;
  plan.rings = rings;
  int boundary_target = std::max(6 * rings, 24);
  plan.per_electrode = std::max(1, static_cast<int>(std::lround(boundary_target * coverage / n_electrodes)));
  plan.per_gap = std::max(1, static_cast<int>(std::lround(boundary_target * (1.0 - coverage) / n_electrodes)));
  int prev = 1;
  int count = 0;
  for (int k = 1; k <= rings; ++k) {
    int nk = k == rings ? n_electrodes * (plan.per_electrode + plan.per_gap) : ring_count(k, n_electrodes);
    count += (k == 1) ? nk : prev + nk;
    prev = nk;
  }
  plan.elements = count;
  return plan;
}

inline void validate_common(double size, int n_electrodes, double coverage) {
  if (!(size > 0.0) || !std::isfinite(size)) throw ConfigError("domain size must be positive");
  if (n_electrodes < 2) throw ConfigError("at least two electrodes are required");
  if (!(coverage > 0.0)) throw ConfigError("electrode coverage must be positive");
  if (!(coverage < 1.0))
    throw ConfigError("infeasible electrode coverage: electrodes would cover the whole boundary");
}

// Boundary edges between consecutive boundary nodes, returned in the order
// the nodes were listed (counter-clockwise).
inline std::vector<int> boundary_edge_indices(const Mesh& m, const std::vector<int>& ring_nodes, int from, int count) {
  std::map<std::pair<int, int>, int> lookup;
  for (int e = 0; e < static_cast<int>(m.boundary_edges.size()); ++e)
    lookup[{m.boundary_edges[e][0], m.boundary_edges[e][1]}] = e;
  const int n = static_cast<int>(ring_nodes.size());
  std::vector<int> out;
  for (int s = 0; s < count; ++s) {
    int a = ring_nodes[(from + s) % n];
    int b = ring_nodes[(from + s + 1) % n];
    auto it = lookup.find({a, b});
    if (it == lookup.end()) throw ConfigError("electrode edge not on boundary");
    out.push_back(it->second);
  }
  return out;
}

}  // namespace detail

/// Ring-structured disk triangulation with `n_electrodes` equally spaced
/// electrodes, electrode l centred at angle 2*pi*l/n_electrodes. Every ring
/// carries a multiple of n_electrodes nodes, so the mesh is invariant under
/// a rotation by one electrode pitch.
inline MeshWithElectrodes build_disk_mesh(double radius, int target_elements, int n_electrodes, double coverage) {
  detail::validate_common(radius, n_electrodes, coverage);
  if (target_elements < 50) throw ConfigError("disk mesh needs target_elements >= 50");

  detail::DiskPlan plan;
  int best_err = -1;
  for (int rings = 2; rings <= 400; ++rings) {
    auto cand = detail::plan_disk(rings, n_electrodes, coverage);
    int err = std::abs(cand.elements - target_elements);
    if (best_err < 0 || err < best_err) {
      best_err = err;
      plan = cand;
    }
    if (cand.elements > 2 * target_elements) break;
  }

  constexpr double two_pi = 2.0 * std::numbers::pi;
  MeshWithElectrodes out;
  Mesh& m = out.mesh;
  const int center = detail::mesh_add_node(m, 0.0, 0.0);

  std::vector<int> prev_nodes{center};
  std::vector<double> prev_angles{0.0};
  std::vector<int> boundary;
  for (int k = 1; k <= plan.rings; ++k) {
    const double r = radius * k / plan.rings;
    std::vector<int> ring;
    std::vector<double> ang;
    if (k < plan.rings) {
      const int nk = detail::ring_count(k, n_electrodes);
      const double offset = (k % 2 == 0) ? std::numbers::pi / nk : 0.0;
      for (int i = 0; i < nk; ++i) ang.push_back(offset + two_pi * i / nk);
    } else {
      const double pitch = two_pi / n_electrodes;
      const double half = 0.5 * coverage * pitch;
      for (int l = 0; l < n_electrodes; ++l) {
        const double c = pitch * l;
        for (int s = 0; s < plan.per_electrode; ++s) ang.push_back(c - half + 2.0 * half * s / plan.per_electrode);
        const double gap = pitch - 2.0 * half;
        for (int s = 0; s < plan.per_gap; ++s) ang.push_back(c + half + gap * s / plan.per_gap);
      }
      for (double& a : ang) {
        a = std::fmod(a, two_pi);
        if (a < 0) a += two_pi;
      }
      // Rotate so angles ascend; the sequence is already cyclically sorted.
      auto first = std::min_element(ang.begin(), ang.end()) - ang.begin();
      std::rotate(ang.begin(), ang.begin() + first, ang.end());
    }
    for (double a : ang) ring.push_back(detail::mesh_add_node(m, r * std::cos(a), r * std::sin(a)));
    if (k == 1) {
      const int nk = static_cast<int>(ring.size());
      for (int i = 0; i < nk; ++i) m.elements.push_back({center, ring[i], ring[(i + 1) % nk]});
    } else {
      detail::stitch_rings(m, prev_nodes, prev_angles, ring, ang);
    }
    prev_nodes = ring;
    prev_angles = ang;
    if (k == plan.rings) boundary = ring;
  }
  m.finalize();

  // Locate the node that starts electrode 0 (angle -half, wrapped).
  const double pitch = two_pi / n_electrodes;
  double start = std::fmod(-0.5 * coverage * pitch + two_pi, two_pi);
  int start_idx = 0;
  double best = 1e300;
  for (int i = 0; i < static_cast<int>(boundary.size()); ++i) {
    double d = std::abs(std::remainder(prev_angles[i] - start, two_pi));
    if (d < best) {
      best = d;
      start_idx = i;
    }
  }
  const int period = plan.per_electrode + plan.per_gap;
  for (int l = 0; l < n_electrodes; ++l)
    out.layout.electrodes.push_back(
        detail::boundary_edge_indices(m, boundary, start_idx + l * period, plan.per_electrode));
  return out;
}

/// Tensor-product square triangulation centred at the origin with
/// n_electrodes/4 electrodes per side. Grid lines pass through every
/// electrode end point.
inline MeshWithElectrodes build_square_mesh(double width, int target_elements, int n_electrodes, double coverage) {
  detail::validate_common(width, n_electrodes, coverage);
  if (n_electrodes % 4 != 0) throw ConfigError("square mesh needs a multiple of 4 electrodes");
  if (target_elements < 8) throw ConfigError("square mesh needs target_elements >= 8");

  const int per_side = n_electrodes / 4;
  const double cell = width / per_side;
  // Segments along one side: gap, electrode, gap per electrode cell.
  std::vector<double> breaks{-0.5 * width};
  std::vector<bool> is_electrode;
  for (int c = 0; c < per_side; ++c) {
    const double c0 = -0.5 * width + c * cell;
    const double e0 = c0 + 0.5 * (1.0 - coverage) * cell;
    const double e1 = e0 + coverage * cell;
    breaks.push_back(e0);
    is_electrode.push_back(false);
    breaks.push_back(e1);
    is_electrode.push_back(true);
    breaks.push_back(c0 + cell);
    is_electrode.push_back(false);
  }
  breaks.back() = 0.5 * width;
  const int nseg = static_cast<int>(is_electrode.size());
  const int n_axis = std::max(nseg, static_cast<int>(std::lround(std::sqrt(target_elements / 2.0))));

  std::vector<int> cells(nseg, 1);
  int assigned = nseg;
  // Largest-remainder allocation of the remaining cells by segment length.
  {
    std::vector<double> want(nseg);
    for (int s = 0; s < nseg; ++s) want[s] = (breaks[s + 1] - breaks[s]) / width * n_axis;
    while (assigned < n_axis) {
      int best = 0;
      double best_def = -1e300;
      for (int s = 0; s < nseg; ++s) {
        double def = want[s] - cells[s];
        if (def > best_def + 1e-12) {
          best_def = def;
          best = s;
        }
      }
      ++cells[best];
      ++assigned;
    }
  }
  std::vector<double> coords;
  std::vector<int> seg_start;  // index into coords where each segment starts
  for (int s = 0; s < nseg; ++s) {
    seg_start.push_back(static_cast<int>(coords.size()));
    for (int i = 0; i < cells[s]; ++i) coords.push_back(breaks[s] + (breaks[s + 1] - breaks[s]) * i / cells[s]);
  }
  coords.push_back(0.5 * width);
  const int n = static_cast<int>(coords.size()) - 1;  // cells per axis

  MeshWithElectrodes out;
  Mesh& m = out.mesh;
  auto node_id = [n](int i, int j) { return j * (n + 1) + i; };
  for (int j = 0; j <= n; ++j)
    for (int i = 0; i <= n; ++i) m.nodes.emplace_back(coords[i], coords[j]);
  for (int j = 0; j < n; ++j) {
    for (int i = 0; i < n; ++i) {
      int a = node_id(i, j), b = node_id(i + 1, j), c = node_id(i + 1, j + 1), d = node_id(i, j + 1);
      // Diagonals point towards the centre in each quadrant so the mesh
      // keeps the square's symmetries.
      bool right = coords[i] + coords[i + 1] >= 0.0;
      bool top = coords[j] + coords[j + 1] >= 0.0;
      if (right == top) {
        m.elements.push_back({a, b, c});
        m.elements.push_back({a, c, d});
      } else {
        m.elements.push_back({a, b, d});
        m.elements.push_back({b, c, d});
      }
    }
  }
  m.finalize();

  // Boundary node loop, counter-clockwise from the bottom-left corner.
  std::vector<int> loop;
  for (int i = 0; i < n; ++i) loop.push_back(node_id(i, 0));
  for (int j = 0; j < n; ++j) loop.push_back(node_id(n, j));
  for (int i = n; i > 0; --i) loop.push_back(node_id(i, n));
  for (int j = n; j > 0; --j) loop.push_back(node_id(0, j));

  for (int side = 0; side < 4; ++side) {
    for (int c = 0; c < per_side; ++c) {
      const int s = 3 * c + 1;
      // Sides 2 and 3 run in the negative coordinate direction.
      int from;
      if (side < 2) {
        from = side * n + seg_start[s];
      } else {
        const int end_coord = seg_start[s] + cells[s];
        from = side * n + (n - end_coord);
      }
      out.layout.electrodes.push_back(detail::boundary_edge_indices(m, loop, from, cells[s]));
    }
  }
  // Sides 2 and 3 were visited in reverse coordinate order; electrodes on
  // those sides must be listed counter-clockwise as well.
  for (int side = 2; side < 4; ++side)
    std::reverse(out.layout.electrodes.begin() + side * per_side, out.layout.electrodes.begin() + (side + 1) * per_side);
  return out;
}

/// Graph Laplacian of the element edge-adjacency graph.
inline SpMat element_adjacency_laplacian(const Mesh& mesh) {
  const int n = mesh.n_elements();
  std::vector<Triplet> trip;
  trip.reserve(static_cast<size_t>(n) * 4);
  for (int e = 0; e < n; ++e) {
    trip.emplace_back(e, e, static_cast<double>(mesh.element_neighbors[e].size()));
    for (int nb : mesh.element_neighbors[e]) trip.emplace_back(e, nb, -1.0);
  }
  SpMat L(n, n);
  L.setFromTriplets(trip.begin(), trip.end());
  return L;
}

}  // namespace nnqn
