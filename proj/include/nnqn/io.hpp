#pragma once

// File formats shared by the command-line tool: mesh and phantom JSON,
// measurement / Jacobian / reconstruction CSVs.

#include "nnqn/core.hpp"
#include "nnqn/forward_cem.hpp"
#include "nnqn/mesh.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace nnqn {

inline std::ofstream open_output(const std::string& path) {
  const auto parent = std::filesystem::path(path).parent_path();
  if (!parent.empty()) std::filesystem::create_directories(parent);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot write " + path);
  return f;
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open " + path);
  try {
    return nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  auto f = open_output(path);
  f << j.dump(2) << '\n';
}

// ---------------------------------------------------------------- mesh ----

/// Electrodes are stored as node pairs so the file does not depend on the
/// internal boundary-edge numbering.
inline nlohmann::json mesh_to_json(const MeshWithElectrodes& g, const nlohmann::json& meta = nlohmann::json::object()) {
  nlohmann::json nodes = nlohmann::json::array(), elements = nlohmann::json::array(),
                 electrodes = nlohmann::json::array();
  for (const auto& p : g.mesh.nodes) nodes.push_back({p.x(), p.y()});
  for (const auto& t : g.mesh.elements) elements.push_back({t[0], t[1], t[2]});
  for (const auto& el : g.layout.electrodes) {
    nlohmann::json edges = nlohmann::json::array();
    for (int e : el) edges.push_back({g.mesh.boundary_edges[e][0], g.mesh.boundary_edges[e][1]});
    electrodes.push_back(edges);
  }
  return {{"format", "nnqn-mesh"}, {"version", 1},       {"meta", meta},
          {"nodes", nodes},        {"elements", elements}, {"electrodes", electrodes}};
}

inline MeshWithElectrodes mesh_from_json(const nlohmann::json& j) {
  MeshWithElectrodes g;
  try {
    if (j.value("format", "") != "nnqn-mesh") throw FormatError("not a mesh file");
    for (const auto& p : j.at("nodes")) g.mesh.nodes.emplace_back(p.at(0).get<double>(), p.at(1).get<double>());
    const int n_nodes = g.mesh.n_nodes();
    for (const auto& t : j.at("elements")) {
      std::array<int, 3> tri{t.at(0).get<int>(), t.at(1).get<int>(), t.at(2).get<int>()};
      for (int v : tri)
        if (v < 0 || v >= n_nodes) throw FormatError("element references a missing node");
      g.mesh.elements.push_back(tri);
    }
    if (g.mesh.elements.empty()) throw FormatError("mesh has no elements");
    try {
      g.mesh.finalize();
    } catch (const ConfigError& e) {
      throw FormatError(e.what());
    }
    std::map<std::pair<int, int>, int> edge_index;
    for (int i = 0; i < static_cast<int>(g.mesh.boundary_edges.size()); ++i) {
      const auto& ed = g.mesh.boundary_edges[i];
      edge_index[{std::min(ed[0], ed[1]), std::max(ed[0], ed[1])}] = i;
    }
    for (const auto& el : j.at("electrodes")) {
      std::vector<int> edges;
      for (const auto& ed : el) {
        const int a = ed.at(0).get<int>(), b = ed.at(1).get<int>();
        auto it = edge_index.find({std::min(a, b), std::max(a, b)});
        if (it == edge_index.end()) throw FormatError("electrode edge is not on the boundary");
        edges.push_back(it->second);
      }
      g.layout.electrodes.push_back(edges);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("bad mesh file: ") + e.what());
  }
  return g;
}

inline void save_mesh(const std::string& path, const MeshWithElectrodes& g, const nlohmann::json& meta = {}) {
  write_json_file(path, mesh_to_json(g, meta.is_null() ? nlohmann::json::object() : meta));
}

inline MeshWithElectrodes load_mesh(const std::string& path) {
  try {
    return mesh_from_json(read_json_file(path));
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

/// Index of the element containing p, or -1. Linear scan; meshes here are small.
inline int locate_element(const Mesh& m, const Point& p, double tol = 1e-12) {
  for (int e = 0; e < m.n_elements(); ++e) {
    const auto& t = m.elements[e];
    const Point& a = m.nodes[t[0]];
    const Point& b = m.nodes[t[1]];
    const Point& c = m.nodes[t[2]];
    const double area2 = 2.0 * m.signed_area(e);
    const double l0 = ((b - p).x() * (c - p).y() - (c - p).x() * (b - p).y()) / area2;
    const double l1 = ((c - p).x() * (a - p).y() - (a - p).x() * (c - p).y()) / area2;
    const double l2 = 1.0 - l0 - l1;
    if (l0 >= -tol && l1 >= -tol && l2 >= -tol) return e;
  }
  return -1;
}

// ------------------------------------------------------------- phantom ----

enum class InclusionShape { Disk, Rect };

/// Disk: size = radius. Rect: axis-aligned, size = {width, height}.
struct Inclusion {
  InclusionShape shape = InclusionShape::Disk;
  Point center = Point::Zero();
  Eigen::Vector2d size = Eigen::Vector2d::Zero();
  double value = 1.0;

  bool contains(const Point& p) const {
    if (shape == InclusionShape::Disk) return (p - center).norm() <= size.x();
    return std::abs(p.x() - center.x()) <= 0.5 * size.x() && std::abs(p.y() - center.y()) <= 0.5 * size.y();
  }
};

struct Phantom {
  double background = 1.0;
  std::vector<Inclusion> inclusions;

  /// Each inclusion must have a positive value and size, its center inside
  /// the mesh, and cover at least one element centroid.
  void validate(const Mesh& mesh) const {
    if (!(background > 0.0) || !std::isfinite(background)) throw ConfigError("phantom background must be positive");
    for (size_t i = 0; i < inclusions.size(); ++i) {
      const auto& inc = inclusions[i];
      const std::string tag = "phantom inclusion " + std::to_string(i);
      if (!(inc.value > 0.0) || !std::isfinite(inc.value)) throw ConfigError(tag + ": value must be positive");
      if (!(inc.size.x() > 0.0) || (inc.shape == InclusionShape::Rect && !(inc.size.y() > 0.0)))
        throw ConfigError(tag + ": size must be positive");
      if (locate_element(mesh, inc.center) < 0) throw ConfigError(tag + ": center lies outside the domain");
      bool covers = false;
      for (int e = 0; e < mesh.n_elements() && !covers; ++e) covers = inc.contains(mesh.centroid(e));
      if (!covers) throw ConfigError(tag + ": covers no element");
    }
  }

  /// Element values by centroid; later inclusions overwrite earlier ones.
  ConductivityField rasterize(const Mesh& mesh) const {
    Vec v = Vec::Constant(mesh.n_elements(), background);
    for (int e = 0; e < mesh.n_elements(); ++e)
      for (const auto& inc : inclusions)
        if (inc.contains(mesh.centroid(e))) v[e] = inc.value;
    return ConductivityField(v);
  }
};

inline nlohmann::json to_json(const Phantom& p) {
  nlohmann::json inc = nlohmann::json::array();
  for (const auto& i : p.inclusions) {
    nlohmann::json size = i.shape == InclusionShape::Disk ? nlohmann::json(i.size.x())
                                                          : nlohmann::json({i.size.x(), i.size.y()});
    inc.push_back({{"shape", i.shape == InclusionShape::Disk ? "disk" : "rect"},
                   {"center", {i.center.x(), i.center.y()}},
                   {"size", size},
                   {"value", i.value}});
  }
  return {{"background", p.background}, {"inclusions", inc}};
}

inline Phantom phantom_from_json(const nlohmann::json& j) {
  Phantom p;
  try {
    p.background = j.at("background").get<double>();
    for (const auto& i : j.value("inclusions", nlohmann::json::array())) {
      Inclusion inc;
      const std::string shape = i.at("shape").get<std::string>();
      if (shape == "disk") {
        inc.shape = InclusionShape::Disk;
        inc.size = {i.at("size").get<double>(), 0.0};
      } else if (shape == "rect") {
        inc.shape = InclusionShape::Rect;
        const auto& s = i.at("size");
        inc.size = s.is_array() ? Eigen::Vector2d(s.at(0).get<double>(), s.at(1).get<double>())
                                : Eigen::Vector2d(s.get<double>(), s.get<double>());
      } else {
        throw ConfigError("unknown inclusion shape '" + shape + "'");
      }
      inc.center = {i.at("center").at(0).get<double>(), i.at("center").at(1).get<double>()};
      inc.value = i.at("value").get<double>();
      p.inclusions.push_back(inc);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad phantom: ") + e.what());
  }
  return p;
}

// ----------------------------------------------------------------- CSV ----

// Matrix CSVs start with a comment line carrying the dimensions and any
// metadata as JSON, then a header row, then row-major values.

inline void write_matrix_csv(std::ostream& os, const Mat& M, nlohmann::json meta = nlohmann::json::object()) {
  meta["rows"] = M.rows();
  meta["cols"] = M.cols();
  os << "# " << meta.dump() << '\n';
  for (Index j = 0; j < M.cols(); ++j) os << (j ? "," : "") << "c" << j;
  os << '\n' << std::setprecision(17);
  for (Index i = 0; i < M.rows(); ++i) {
    for (Index j = 0; j < M.cols(); ++j) os << (j ? "," : "") << M(i, j);
    os << '\n';
  }
}

struct CsvTable {
  nlohmann::json meta;
  std::vector<std::string> columns;
  Mat values;

  Index column(const std::string& name) const {
    for (size_t j = 0; j < columns.size(); ++j)
      if (columns[j] == name) return static_cast<Index>(j);
    throw FormatError("CSV has no column '" + name + "'");
  }
};

/// Reads a numeric CSV with an optional "# {json}" first line. Empty cells read as NaN.
inline CsvTable read_csv_table(std::istream& is, const std::string& what = "CSV") {
  CsvTable t;
  t.meta = nlohmann::json::object();
  std::string line;
  if (!std::getline(is, line)) throw FormatError(what + ": empty file");
  if (line.rfind("# ", 0) == 0) {
    try {
      t.meta = nlohmann::json::parse(line.substr(2));
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(what + ": bad metadata line: " + e.what());
    }
    if (!std::getline(is, line)) throw FormatError(what + ": missing header row");
  }
  {
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) t.columns.push_back(c);
  }
  if (t.columns.empty()) throw FormatError(what + ": missing header row");
  std::vector<std::vector<double>> rows;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      if (cell.empty()) {
        row.push_back(std::numeric_limits<double>::quiet_NaN());
        continue;
      }
      size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(cell, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != cell.size()) throw FormatError(what + ": non-numeric cell '" + cell + "'");
      row.push_back(v);
    }
    if (!line.empty() && line.back() == ',') row.push_back(std::numeric_limits<double>::quiet_NaN());
    if (row.size() != t.columns.size())
      throw FormatError(what + ": row " + std::to_string(rows.size()) + " has " + std::to_string(row.size()) +
                        " cells, expected " + std::to_string(t.columns.size()));
    rows.push_back(std::move(row));
  }
  t.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(t.columns.size()));
  for (size_t i = 0; i < rows.size(); ++i)
    for (size_t j = 0; j < rows[i].size(); ++j) t.values(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  if (t.meta.contains("rows") && t.meta["rows"].get<Index>() != t.values.rows())
    throw FormatError(what + ": row count does not match metadata");
  return t;
}

inline CsvTable read_csv_table(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw FormatError("cannot open " + path);
  return read_csv_table(f, path);
}

inline Mat read_matrix_csv(const std::string& path) { return read_csv_table(path).values; }

/// Columns index, value[, noise_std].
inline void write_measurement_csv(std::ostream& os, const MeasurementFrame& f,
                                  nlohmann::json meta = nlohmann::json::object()) {
  meta["rows"] = f.values.size();
  os << "# " << meta.dump() << '\n' << (f.has_noise_model() ? "index,value,noise_std\n" : "index,value\n");
  os << std::setprecision(17);
  for (Index i = 0; i < f.values.size(); ++i) {
    os << i << ',' << f.values[i];
    if (f.has_noise_model()) os << ',' << f.noise_std[i];
    os << '\n';
  }
}

inline MeasurementFrame read_measurement_csv(const std::string& path, nlohmann::json* meta = nullptr) {
  const CsvTable t = read_csv_table(path);
  MeasurementFrame f;
  f.values = t.values.col(t.column("value"));
  if (std::find(t.columns.begin(), t.columns.end(), "noise_std") != t.columns.end())
    f.noise_std = t.values.col(t.column("noise_std"));
  if (!f.values.allFinite()) throw FormatError(path + ": non-finite measurement");
  if (meta) *meta = t.meta;
  return f;
}

/// Columns element, cx, cy, sigma.
inline void write_reconstruction_csv(std::ostream& os, const Mesh& mesh, const Vec& sigma,
                                     nlohmann::json meta = nlohmann::json::object()) {
  require(sigma.size() == mesh.n_elements(), "write_reconstruction_csv: one value per element");
  meta["rows"] = sigma.size();
  os << "# " << meta.dump() << '\n' << "element,cx,cy,sigma\n" << std::setprecision(17);
  for (int e = 0; e < mesh.n_elements(); ++e) {
    const Point c = mesh.centroid(e);
    os << e << ',' << c.x() << ',' << c.y() << ',' << sigma[e] << '\n';
  }
}

inline Vec read_element_values(const std::string& path, const std::string& column = "sigma") {
  const CsvTable t = read_csv_table(path);
  return t.values.col(t.column(column));
}

}  // namespace nnqn
