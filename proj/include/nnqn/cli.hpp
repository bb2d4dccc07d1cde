#pragma once

// The `nnqn` command-line pipeline. Every command reads one JSON config
// (all sections optional), applies command-line overrides, and echoes the
// effective config into the headers of the files it writes.

#include "nnqn/drivers.hpp"
#include "nnqn/io.hpp"
#include "nnqn/mlp.hpp"
#include "nnqn/plot.hpp"
#include "nnqn/sampler.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>
#include <optional>
#include <set>

namespace nnqn::cli {

enum ExitCode : int { kSuccess = 0, kUsageError = 2, kNumericalFailure = 3 };

struct GeometryConfig {
  std::string shape = "disk";   // disk | square
  double size = 14.0;           // disk radius or square width
  int target_elements = 1000;
  int electrodes = 16;
  double coverage = 0.5;
  double contact_impedance = 1e-2;

  void validate() const {
    if (shape != "disk" && shape != "square") throw ConfigError("geometry.shape must be 'disk' or 'square'");
    if (!(contact_impedance > 0.0)) throw ConfigError("geometry.contact_impedance must be positive");
  }

  MeshWithElectrodes build() const {
    validate();
    return shape == "disk" ? build_disk_mesh(size, target_elements, electrodes, coverage)
                           : build_square_mesh(size, target_elements, electrodes, coverage);
  }
};

struct SolverConfig {
  std::string method = "nnqn";
  int max_iterations = 100;
  double tolerance = 1e-2;
  double sigma_exp = 1.0;
  double floor_fraction = 0.05;
  bool diagnostics = false;
};

struct RunConfig {
  GeometryConfig geometry;
  nlohmann::json phantom = {{"background", 1.0}, {"inclusions", nlohmann::json::array()}};
  double noise_level = 0.01;
  FieldSamplerConfig sampler = default_sampler();
  Index n_train = 5000;
  Index n_val = 1000;
  std::string jacobian_route = "adjoint";  // adjoint | perturbation
  TrainingConfig training;
  Regularizer prior;
  SolverConfig solver;
  std::uint64_t seed = 0;
  int threads = 1;
  std::string out = ".";
  int image_size = 256;
  bool kernel_length_explicit = false;  // otherwise 0.1 x the mesh diameter

  // Training fields span amplitudes from near-homogeneous to amplitude_std,
  // so the predictor also sees inputs close to the anchor.
  static FieldSamplerConfig default_sampler() {
    FieldSamplerConfig s;
    s.amplitude_spread = 1.0;
    return s;
  }

  TargetJacobian route() const {
    if (jacobian_route == "adjoint") return TargetJacobian::Adjoint;
    if (jacobian_route == "perturbation") return TargetJacobian::Perturbation;
    throw ConfigError("dataset.jacobian must be 'adjoint' or 'perturbation'");
  }

  void validate() const {
    geometry.validate();
    sampler.validate();
    training.validate();
    prior.validate();
    route();
    solver_method_from_string(solver.method);
    if (!(noise_level >= 0.0)) throw ConfigError("noise.level must be non-negative");
    if (n_train < 1 || n_val < 1) throw ConfigError("dataset needs n_train >= 1 and n_val >= 1");
    if (threads < 1) throw ConfigError("threads must be at least 1");
    if (image_size < 8) throw ConfigError("image_size must be at least 8");
  }
};

inline nlohmann::json to_json(const RunConfig& c) {
  return {{"geometry",
           {{"shape", c.geometry.shape},
            {"size", c.geometry.size},
            {"target_elements", c.geometry.target_elements},
            {"electrodes", c.geometry.electrodes},
            {"coverage", c.geometry.coverage},
            {"contact_impedance", c.geometry.contact_impedance}}},
          {"phantom", c.phantom},
          {"noise", {{"level", c.noise_level}}},
          {"sampler", nnqn::to_json(c.sampler)},
          {"dataset", {{"n_train", c.n_train}, {"n_val", c.n_val}, {"jacobian", c.jacobian_route}}},
          {"training", nnqn::to_json(c.training)},
          {"prior", {{"kind", to_string(c.prior.kind)}, {"weight", c.prior.weight}, {"beta", c.prior.beta}}},
          {"solver",
           {{"method", c.solver.method},
            {"max_iterations", c.solver.max_iterations},
            {"tolerance", c.solver.tolerance},
            {"sigma_exp", c.solver.sigma_exp},
            {"floor_fraction", c.solver.floor_fraction},
            {"diagnostics", c.solver.diagnostics}}},
          {"seed", c.seed},
          {"threads", c.threads},
          {"out", c.out},
          {"image_size", c.image_size}};
}

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [k, v] : j.items())
    if (!ok.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

template <class T>
void take(const nlohmann::json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace detail

/// Config from JSON; missing keys keep their defaults, unknown keys are errors.
/// Section seeds default to the global seed.
inline RunConfig config_from_json(const nlohmann::json& j) {
  using detail::check_keys;
  using detail::take;
  RunConfig c;
  try {
    check_keys(j, "config", {"geometry", "phantom", "noise", "sampler", "dataset", "training", "prior", "solver", "seed",
                             "threads", "out", "image_size"});
    take(j, "seed", c.seed);
    take(j, "threads", c.threads);
    take(j, "out", c.out);
    take(j, "image_size", c.image_size);
    if (j.contains("geometry")) {
      const auto& g = j["geometry"];
      check_keys(g, "geometry", {"shape", "size", "target_elements", "electrodes", "coverage", "contact_impedance"});
      take(g, "shape", c.geometry.shape);
      if (c.geometry.shape == "square") c.geometry.size = 9.54;
      take(g, "size", c.geometry.size);
      take(g, "target_elements", c.geometry.target_elements);
      take(g, "electrodes", c.geometry.electrodes);
      take(g, "coverage", c.geometry.coverage);
      take(g, "contact_impedance", c.geometry.contact_impedance);
    }
    if (j.contains("phantom")) c.phantom = j["phantom"];
    if (j.contains("noise")) {
      check_keys(j["noise"], "noise", {"level"});
      take(j["noise"], "level", c.noise_level);
    }
    c.sampler.rng_seed = c.seed;
    if (j.contains("sampler")) {
      const auto& s = j["sampler"];
      check_keys(s, "sampler", {"sigma_exp", "kernel_length_scale", "amplitude_std", "lower_bound",
                                     "amplitude_spread", "include_anchor", "seed"});
      take(s, "sigma_exp", c.sampler.sigma_exp);
      take(s, "kernel_length_scale", c.sampler.kernel_length_scale);
      c.kernel_length_explicit = s.contains("kernel_length_scale");
      take(s, "amplitude_std", c.sampler.amplitude_std);
      take(s, "lower_bound", c.sampler.lower_bound);
      take(s, "amplitude_spread", c.sampler.amplitude_spread);
      take(s, "include_anchor", c.sampler.include_anchor);
      take(s, "seed", c.sampler.rng_seed);
    }
    if (j.contains("dataset")) {
      check_keys(j["dataset"], "dataset", {"n_train", "n_val", "jacobian"});
      take(j["dataset"], "n_train", c.n_train);
      take(j["dataset"], "n_val", c.n_val);
      take(j["dataset"], "jacobian", c.jacobian_route);
    }
    c.training.rng_seed = c.seed;
    if (j.contains("training")) {
      const auto& t = j["training"];
      check_keys(t, "training", {"initial_lr", "lr_patience", "lr_factor", "l2_kappa", "dropout_rate", "batch_size",
                                 "max_epochs", "early_stop_tol", "early_stop_patience", "normalize_targets",
                                 "output_init_gain", "seed"});
      take(t, "initial_lr", c.training.initial_lr);
      take(t, "lr_patience", c.training.lr_patience);
      take(t, "lr_factor", c.training.lr_factor);
      take(t, "l2_kappa", c.training.l2_kappa);
      take(t, "dropout_rate", c.training.dropout_rate);
      take(t, "batch_size", c.training.batch_size);
      take(t, "max_epochs", c.training.max_epochs);
      take(t, "early_stop_tol", c.training.early_stop_tol);
      take(t, "early_stop_patience", c.training.early_stop_patience);
      take(t, "normalize_targets", c.training.normalize_targets);
      take(t, "output_init_gain", c.training.output_init_gain);
      take(t, "seed", c.training.rng_seed);
    }
    if (j.contains("prior")) {
      const auto& p = j["prior"];
      check_keys(p, "prior", {"kind", "weight", "beta"});
      if (p.contains("kind")) c.prior.kind = prior_kind_from_string(p["kind"].get<std::string>());
      take(p, "weight", c.prior.weight);
      take(p, "beta", c.prior.beta);
    }
    if (j.contains("solver")) {
      const auto& s = j["solver"];
      check_keys(s, "solver", {"method", "max_iterations", "tolerance", "sigma_exp", "floor_fraction", "diagnostics"});
      take(s, "method", c.solver.method);
      take(s, "max_iterations", c.solver.max_iterations);
      take(s, "tolerance", c.solver.tolerance);
      take(s, "sigma_exp", c.solver.sigma_exp);
      take(s, "floor_fraction", c.solver.floor_fraction);
      take(s, "diagnostics", c.solver.diagnostics);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  return c;
}

namespace detail {

inline std::string out_path(const RunConfig& c, const std::string& name) {
  return (std::filesystem::path(c.out) / name).string();
}

inline void require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw ConfigError(what + " is required");
  if (!std::filesystem::is_regular_file(path)) throw ConfigError(what + " '" + path + "' does not exist");
}

/// Mesh from --mesh if given, otherwise generated from the geometry section.
inline MeshWithElectrodes obtain_mesh(const RunConfig& c, const std::string& mesh_path) {
  if (mesh_path.empty()) return c.geometry.build();
  require_file(mesh_path, "mesh file");
  return load_mesh(mesh_path);
}

inline Phantom obtain_phantom(const RunConfig& c, const std::string& phantom_path) {
  if (!phantom_path.empty()) {
    require_file(phantom_path, "phantom file");
    return phantom_from_json(read_json_file(phantom_path));
  }
  if (c.phantom.is_string()) {
    require_file(c.phantom.get<std::string>(), "phantom file");
    return phantom_from_json(read_json_file(c.phantom.get<std::string>()));
  }
  return phantom_from_json(c.phantom);
}

/// max |V(i, j) - V(j, i)| / max |V| over the adjacent protocol's
/// pattern/pair table; zero up to rounding for any conductivity.
inline double reciprocity_residual(const Vec& g, int n_electrodes) {
  const int L = n_electrodes;
  if (g.size() != static_cast<Index>(L) * L) return std::numeric_limits<double>::quiet_NaN();
  double worst = 0.0;
  for (int i = 0; i < L; ++i)
    for (int j = 0; j < L; ++j) worst = std::max(worst, std::abs(g[i * L + j] - g[j * L + i]));
  return worst / std::max(g.cwiseAbs().maxCoeff(), std::numeric_limits<double>::min());
}

struct Measurements {
  MeasurementFrame frame;
  nlohmann::json meta;
};

/// Weighting std from the file, or the nominal 1% model when the data are noiseless.
inline Vec weighting_std(const MeasurementFrame& f) {
  if (f.has_noise_model()) return f.noise_std;
  return nominal_noise_std(f.values, 0.01);
}

inline InverseProblemSpec make_spec(const RunConfig& c, const Mesh& mesh, const MeasurementFrame& f) {
  const Index n = mesh.n_elements();
  InverseProblemSpec spec{f.values, build_noise_weighting(weighting_std(f)).w,
                          Prior(mesh, c.prior, Vec::Constant(n, c.solver.sigma_exp))};
  spec.sigma_exp = c.solver.sigma_exp;
  spec.max_iterations = c.solver.max_iterations;
  spec.tolerance = c.solver.tolerance;
  spec.floor_fraction = c.solver.floor_fraction;
  spec.diagnostics = c.solver.diagnostics;
  spec.threads = c.threads;
  return spec;
}

inline std::shared_ptr<const MLP> load_predictor(const std::string& path, Index n_outputs) {
  require_file(path, "predictor weights (--weights)");
  auto net = std::make_shared<const MLP>(load_weights(path));
  if (net->n_inputs() != n_outputs || net->n_outputs() != n_outputs)
    throw ConfigError("predictor has " + std::to_string(net->n_inputs()) + " inputs and " +
                      std::to_string(net->n_outputs()) + " outputs, the measurement vector has " +
                      std::to_string(n_outputs) + " entries");
  return net;
}

inline void write_reconstruction(const RunConfig& c, const Mesh& mesh, const std::string& mesh_ref,
                                 const Reconstruction& rec, const std::string& stem) {
  const auto& t = rec.trace;
  nlohmann::json meta = {{"method", to_string(t.method)},
                         {"mesh", mesh_ref},
                         {"iterations", t.iterations()},
                         {"termination", to_string(t.termination)},
                         {"init_ms", t.init_ms},
                         {"total_ms", t.total_ms()},
                         {"seed", c.seed},
                         {"config", to_json(c)}};
  {
    auto f = open_output(out_path(c, stem + ".csv"));
    write_reconstruction_csv(f, mesh, rec.sigma, meta);
  }
  nlohmann::json j = meta;
  j["sigma"] = std::vector<double>(rec.sigma.data(), rec.sigma.data() + rec.sigma.size());
  write_json_file(out_path(c, stem + ".json"), j);
  write_trace_csv(out_path(c, stem + "_trace.csv"), t);
}

inline void write_image(const RunConfig& c, const std::string& name, const Image& img) {
  std::filesystem::create_directories(c.out);
  write_ppm(out_path(c, name), img);
}

}  // namespace detail

// ------------------------------------------------------------- commands ----

inline void cmd_mesh(const RunConfig& c, std::ostream& out) {
  const MeshWithElectrodes g = c.geometry.build();
  const std::string path = detail::out_path(c, "mesh.json");
  save_mesh(path, g, {{"config", to_json(c)}, {"seed", c.seed}});
  out << "mesh: " << g.mesh.n_elements() << " elements, " << g.mesh.n_nodes() << " nodes, "
      << g.layout.n_electrodes() << " electrodes, area " << g.mesh.total_area() << " -> " << path << '\n';
}

inline void cmd_simulate(const RunConfig& c, const std::string& mesh_path, const std::string& phantom_path,
                         std::ostream& out) {
  const MeshWithElectrodes g = detail::obtain_mesh(c, mesh_path);
  const Phantom ph = detail::obtain_phantom(c, phantom_path);
  ph.validate(g.mesh);
  const ConductivityField truth = ph.rasterize(g.mesh);
  const CemForwardModel model(make_adjacent_problem(g, c.geometry.contact_impedance));
  const MeasurementFrame clean{model.evaluate(truth.values), {}};
  const MeasurementFrame noisy = add_noise(clean, c.noise_level, c.seed);
  const double recip = detail::reciprocity_residual(clean.values, g.layout.n_electrodes());
  nlohmann::json meta = {{"phantom", to_json(ph)},
                         {"mesh", mesh_path.empty() ? "generated" : mesh_path},
                         {"noise_level", c.noise_level},
                         {"noise_model", "std = level * (|g| + 0.01 * max|g|)"},
                         {"seed", c.seed},
                         {"reciprocity_residual", recip},
                         {"reciprocity_ok", recip < 1e-8},
                         {"config", to_json(c)}};
  {
    auto f = open_output(detail::out_path(c, "measurements_clean.csv"));
    meta["kind"] = "noiseless";
    write_measurement_csv(f, clean, meta);
  }
  {
    auto f = open_output(detail::out_path(c, "measurements.csv"));
    meta["kind"] = "noisy";
    write_measurement_csv(f, noisy, meta);
  }
  {
    auto f = open_output(detail::out_path(c, "truth.csv"));
    meta.erase("kind");
    write_reconstruction_csv(f, g.mesh, truth.values, meta);
  }
  out << "simulate: " << clean.values.size() << " measurements, noise level " << c.noise_level
      << ", reciprocity residual " << recip << (recip < 1e-8 ? " (ok)" : " (FAILED)") << '\n';
}

inline void cmd_dataset(RunConfig c, const std::string& mesh_path, bool csv, std::ostream& out) {
  const MeshWithElectrodes g = detail::obtain_mesh(c, mesh_path);
  if (!c.kernel_length_explicit) c.sampler.kernel_length_scale = 0.1 * g.mesh.diameter();
  const CemForwardModel model(make_adjacent_problem(g, c.geometry.contact_impedance));
  const auto t0 = std::chrono::steady_clock::now();
  TrainingSet ds = build_dataset(model, c.sampler, c.n_train, c.n_val, c.threads, c.route());
  ds.meta["config"] = to_json(c);
  ds.meta["mesh"] = mesh_path.empty() ? "generated" : mesh_path;
  const std::string path = detail::out_path(c, "dataset.bin");
  std::filesystem::create_directories(c.out);
  save_dataset(path, ds);
  if (csv) {
    auto f = open_output(detail::out_path(c, "dataset.csv"));
    write_dataset_csv(f, ds);
  }
  out << "dataset: " << ds.n_train << " train + " << ds.n_val << " validation samples of width " << ds.width()
      << " in " << nnqn::detail::ms_since(t0) / 1000.0 << " s -> " << path << '\n';
}

inline void cmd_train(const RunConfig& c, const std::string& dataset_path, std::ostream& out) {
  detail::require_file(dataset_path, "dataset file (--dataset)");
  const TrainingSet ds = load_dataset(dataset_path);
  MLP net = MLP::singular_value_network(ds.width());
  std::filesystem::create_directories(c.out);
  TrainingHistory hist;
  try {
    hist = train(net, ds, c.training);
  } catch (const TrainingError& e) {
    std::ofstream f(detail::out_path(c, "history.csv"));
    write_history_csv(f, e.history);
    throw;
  }
  {
    std::ofstream f(detail::out_path(c, "history.csv"));
    write_history_csv(f, hist);
  }
  const PredictionReport rep = evaluate_predictor(net, ds);
  nlohmann::json extra = {{"training", to_json(c.training)},
                          {"dataset", dataset_path},
                          {"dataset_meta", ds.meta},
                          {"best_epoch", hist.best_epoch},
                          {"seed", c.training.rng_seed},
                          {"validation", {{"median_rel_error_top32", rep.median_top},
                                          {"median_rel_error_all", rep.median_all}}}};
  const std::string path = detail::out_path(c, "weights.nnqn");
  save_weights(path, net, extra);
  out << "train: " << hist.epochs.size() - 1 << " epochs (best " << hist.best_epoch << ", "
      << (hist.early_stopped ? "early stop" : "epoch limit") << ") in " << hist.seconds
      << " s; validation median relative error top-32 " << rep.median_top << ", all " << rep.median_all << " -> "
      << path << '\n';
}

inline void cmd_reconstruct(const RunConfig& c, const std::string& mesh_path, const std::string& meas_path,
                            const std::string& weights_path, std::ostream& out) {
  const SolverMethod method = solver_method_from_string(c.solver.method);
  const MeshWithElectrodes g = detail::obtain_mesh(c, mesh_path);
  detail::require_file(meas_path, "measurement file (--measurements)");
  const MeasurementFrame f = read_measurement_csv(meas_path);
  auto model = std::make_shared<const CemForwardModel>(make_adjacent_problem(g, c.geometry.contact_impedance));
  if (f.values.size() != model->n_outputs())
    throw ConfigError("measurement file has " + std::to_string(f.values.size()) + " values, the model produces " +
                      std::to_string(model->n_outputs()));
  SingularValueSource predictor;
  if (method == SolverMethod::NNQN)
    predictor = mlp_singular_value_source(detail::load_predictor(weights_path, model->n_outputs()));
  const ForwardOperator op = make_forward_operator(model, c.threads);
  const InverseProblemSpec spec = detail::make_spec(c, g.mesh, f);
  const Reconstruction rec = run_method(method, op, spec, g.mesh.n_elements(), predictor);
  detail::write_reconstruction(c, g.mesh, mesh_path.empty() ? "generated" : mesh_path, rec, "reconstruction");
  out << "reconstruct: " << to_string(method) << ", " << rec.trace.iterations() << " iterations, "
      << to_string(rec.trace.termination) << ", " << rec.trace.total_ms() / 1000.0 << " s after "
      << rec.trace.init_ms / 1000.0 << " s initialization\n";
}

struct BenchmarkRow {
  std::string method;
  double mean_time_s = 0.0;
  double mean_iterations = 0.0;
  double init_s = 0.0;
  int converged = 0;
  int repeats = 0;
};

inline void cmd_benchmark(const RunConfig& c, const std::string& mesh_path, const std::string& meas_path,
                          const std::string& weights_path, int repeats, bool diagnostics, std::ostream& out) {
  if (repeats < 1) throw ConfigError("--repeats must be at least 1");
  const MeshWithElectrodes g = detail::obtain_mesh(c, mesh_path);
  detail::require_file(meas_path, "measurement file (--measurements)");
  const MeasurementFrame f = read_measurement_csv(meas_path);
  auto model = std::make_shared<const CemForwardModel>(make_adjacent_problem(g, c.geometry.contact_impedance));
  if (f.values.size() != model->n_outputs()) throw ConfigError("measurement count does not match the model");
  auto net = detail::load_predictor(weights_path, model->n_outputs());
  const ForwardOperator op = make_forward_operator(model, c.threads);
  InverseProblemSpec spec = detail::make_spec(c, g.mesh, f);
  const Index n = g.mesh.n_elements();

  std::vector<BenchmarkRow> rows;
  std::vector<Series> jac_err;
  Reconstruction nnqn_run;
  for (SolverMethod m : {SolverMethod::GaussNewton, SolverMethod::Broyden, SolverMethod::NNQN}) {
    BenchmarkRow row{to_string(m)};
    row.repeats = repeats;
    for (int r = 0; r < repeats; ++r) {
      // Diagnostics only on the first repeat; they are excluded from timing anyway.
      spec.diagnostics = diagnostics && r == 0;
      Reconstruction rec = run_method(m, op, spec, n, mlp_singular_value_source(net));
      row.mean_time_s += rec.trace.total_ms() / 1000.0 / repeats;
      row.mean_iterations += static_cast<double>(rec.trace.iterations()) / repeats;
      row.init_s += rec.trace.init_ms / 1000.0 / repeats;
      row.converged += rec.trace.converged();
      if (r == 0) {
        detail::write_reconstruction(c, g.mesh, mesh_path.empty() ? "generated" : mesh_path, rec,
                                     "benchmark_" + to_string(m));
        if (diagnostics) {
          Series s{to_string(m), {}, {}};
          for (const auto& rec_it : rec.trace.records) {
            s.x.push_back(rec_it.iteration);
            s.y.push_back(rec_it.jac_err);
          }
          jac_err.push_back(s);
        }
        if (m == SolverMethod::NNQN) nnqn_run = rec;
      }
    }
    rows.push_back(row);
  }

  {
    auto t = open_output(detail::out_path(c, "benchmark.csv"));
    t << "# " << nlohmann::json({{"config", to_json(c)}, {"seed", c.seed}, {"repeats", repeats}}).dump() << '\n'
      << "method,mean_time_s,mean_iterations,init_s,converged_runs\n"
      << std::setprecision(10);
    for (const auto& r : rows)
      t << r.method << ',' << r.mean_time_s << ',' << r.mean_iterations << ',' << r.init_s << ',' << r.converged << '\n';
  }
  // Singular values at the final NN-QN iterate: accurate vs predicted, and the anchor's.
  const Vec s_true = jacobian_singular_values(op.jacobian_accurate(nnqn_run.sigma));
  const Vec s_pred = predict_singular_values(*net, op.evaluate(nnqn_run.sigma));
  const Vec s_anchor = jacobian_singular_values(op.jacobian_accurate(spec.sigma0(n)));
  std::vector<Series> sv{{"accurate", {}, {}}, {"predicted", {}, {}}, {"anchor", {}, {}}};
  for (Index j = 0; j < s_true.size(); ++j) {
    for (auto& s : sv) s.x.push_back(static_cast<double>(j));
    sv[0].y.push_back(s_true[j]);
    sv[1].y.push_back(s_pred[j]);
    sv[2].y.push_back(s_anchor[j]);
  }
  {
    auto t = open_output(detail::out_path(c, "singular_values.csv"));
    write_series_csv(t, sv);
  }
  detail::write_image(c, "singular_values.ppm", render_line_plot(sv, 2 * c.image_size, c.image_size, true));
  if (diagnostics) {
    auto t = open_output(detail::out_path(c, "jacobian_error.csv"));
    write_series_csv(t, jac_err);
    detail::write_image(c, "jacobian_error.ppm", render_line_plot(jac_err, 2 * c.image_size, c.image_size));
  }

  out << std::left << std::setw(10) << "method" << std::setw(22) << "mean time (s)" << std::setw(18)
      << "mean iterations" << "converged\n";
  for (const auto& r : rows)
    out << std::setw(10) << r.method << std::setw(22) << r.mean_time_s << std::setw(18) << r.mean_iterations
        << r.converged << '/' << r.repeats << '\n';
  const double nnqn_time = rows[2].mean_time_s;
  out << "GN / NN-QN time ratio: " << (nnqn_time > 0 ? rows[0].mean_time_s / nnqn_time : 0.0) << '\n';
}

inline void cmd_plot(const RunConfig& c, const std::string& mesh_path, const std::string& values_path,
                     const std::string& series_path, const std::string& trace_path, bool log_y,
                     const std::string& name, std::ostream& out) {
  int made = 0;
  auto stem = [&](const std::string& input) {
    return name.empty() ? std::filesystem::path(input).stem().string() : name;
  };
  if (!values_path.empty()) {
    detail::require_file(values_path, "element value file (--values)");
    const MeshWithElectrodes g = detail::obtain_mesh(c, mesh_path);
    const Vec v = read_element_values(values_path);
    if (v.size() != g.mesh.n_elements())
      throw FormatError(values_path + ": " + std::to_string(v.size()) + " values for a mesh with " +
                        std::to_string(g.mesh.n_elements()) + " elements");
    const std::string file = stem(values_path) + ".ppm";
    detail::write_image(c, file, render_heatmap(g.mesh, v, c.image_size, c.image_size));
    out << "plot: heatmap " << detail::out_path(c, file) << " (range " << v.minCoeff() << " .. " << v.maxCoeff()
        << ")\n";
    ++made;
  }
  if (!series_path.empty()) {
    detail::require_file(series_path, "series file (--series)");
    std::ifstream f(series_path);
    std::string line;
    std::getline(f, line);
    if (line != "series,x,y") throw FormatError(series_path + ": expected header 'series,x,y'");
    std::vector<Series> series;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::stringstream ss(line);
      std::string name_cell, xs, ys;
      if (!std::getline(ss, name_cell, ',') || !std::getline(ss, xs, ',') || !std::getline(ss, ys))
        throw FormatError(series_path + ": malformed row '" + line + "'");
      if (series.empty() || series.back().name != name_cell) series.push_back({name_cell, {}, {}});
      try {
        series.back().x.push_back(std::stod(xs));
        series.back().y.push_back(ys.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(ys));
      } catch (const std::exception&) {
        throw FormatError(series_path + ": non-numeric row '" + line + "'");
      }
    }
    const std::string file = stem(series_path) + ".ppm";
    detail::write_image(c, file, render_line_plot(series, 2 * c.image_size, c.image_size, log_y));
    out << "plot: " << series.size() << " series -> " << detail::out_path(c, file) << '\n';
    ++made;
  }
  if (!trace_path.empty()) {
    detail::require_file(trace_path, "trace file (--trace)");
    const CsvTable t = read_csv_table(trace_path);
    const Index it = t.column("iteration");
    std::vector<Series> series;
    for (const char* col : {"criterion", "jac_err_spectral"}) {
      Series s{col, {}, {}};
      for (Index i = 0; i < t.values.rows(); ++i) {
        s.x.push_back(t.values(i, it));
        s.y.push_back(t.values(i, t.column(col)));
      }
      series.push_back(s);
    }
    const std::string file = stem(trace_path) + ".ppm";
    detail::write_image(c, file, render_line_plot(series, 2 * c.image_size, c.image_size, true));
    out << "plot: trace -> " << detail::out_path(c, file) << '\n';
    ++made;
  }
  if (made == 0) throw ConfigError("plot needs --values, --series or --trace");
}

// ----------------------------------------------------------------- main ----

/// Parses argv and runs one command. Returns the process exit code.
inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Neural-network quasi-Newton EIT reconstruction"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path, out_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  app.add_option("--config", config_path, "JSON config file");
  app.add_option("--seed", seed, "Seed for every random stream");
  app.add_option("--threads", threads, "Worker threads");
  app.add_option("--out", out_dir, "Output directory");

  std::string mesh_path, phantom_path, meas_path, weights_path, dataset_path, values_path, series_path, trace_path,
      plot_name;
  std::optional<std::string> shape, method;
  std::optional<double> size, noise;
  std::optional<int> elements, electrodes, epochs;
  std::optional<Index> n_train, n_val;
  bool csv = false, log_y = false, no_diag = false;
  int repeats = 1;

  auto* mesh = app.add_subcommand("mesh", "Generate a disk or square mesh");
  mesh->add_option("--shape", shape, "disk | square");
  mesh->add_option("--size", size, "Disk radius or square width");
  mesh->add_option("--elements", elements, "Target element count");
  mesh->add_option("--electrodes", electrodes, "Electrode count");

  auto* simulate = app.add_subcommand("simulate", "Synthesize measurements for a phantom");
  simulate->add_option("--mesh", mesh_path, "Mesh JSON (default: generate from config)");
  simulate->add_option("--phantom", phantom_path, "Phantom JSON (default: config.phantom)");
  simulate->add_option("--noise", noise, "Relative noise level");

  auto* dataset = app.add_subcommand("dataset", "Build the singular-value training set");
  dataset->add_option("--mesh", mesh_path, "Mesh JSON");
  dataset->add_option("--n-train", n_train, "Training samples");
  dataset->add_option("--n-val", n_val, "Validation samples");
  dataset->add_flag("--csv", csv, "Also write dataset.csv");

  auto* trainc = app.add_subcommand("train", "Train the singular-value predictor");
  trainc->add_option("--dataset", dataset_path, "Dataset file")->required();
  trainc->add_option("--epochs", epochs, "Maximum epochs");

  auto* recon = app.add_subcommand("reconstruct", "Reconstruct conductivity from measurements");
  recon->add_option("--mesh", mesh_path, "Mesh JSON");
  recon->add_option("--measurements", meas_path, "Measurement CSV")->required();
  recon->add_option("--method", method, "gn | broyden | nnqn");
  recon->add_option("--weights", weights_path, "Predictor weights (nnqn)");

  auto* bench = app.add_subcommand("benchmark", "Run all three methods on the same data");
  bench->add_option("--mesh", mesh_path, "Mesh JSON");
  bench->add_option("--measurements", meas_path, "Measurement CSV")->required();
  bench->add_option("--weights", weights_path, "Predictor weights")->required();
  bench->add_option("--repeats", repeats, "Runs per method");
  bench->add_flag("--no-diagnostics", no_diag, "Skip the Jacobian-error diagnostics");

  auto* plot = app.add_subcommand("plot", "Render heatmaps and line plots");
  plot->add_option("--mesh", mesh_path, "Mesh JSON for --values");
  plot->add_option("--values", values_path, "Per-element CSV (reconstruction or truth)");
  plot->add_option("--series", series_path, "Long-format series CSV");
  plot->add_option("--trace", trace_path, "Solver trace CSV");
  plot->add_option("--name", plot_name, "Output file stem");
  plot->add_flag("--log", log_y, "Logarithmic y axis for --series");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kSuccess;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kUsageError;
  }

  try {
    RunConfig c;
    if (!config_path.empty()) {
      detail::require_file(config_path, "config file");
      c = config_from_json(read_json_file(config_path));
    }
    if (seed) c.seed = c.sampler.rng_seed = c.training.rng_seed = *seed;
    if (threads) c.threads = *threads;
    if (!out_dir.empty()) c.out = out_dir;
    if (shape) {
      c.geometry.shape = *shape;
      if (!size && *shape == "square") c.geometry.size = 9.54;
    }
    if (size) c.geometry.size = *size;
    if (elements) c.geometry.target_elements = *elements;
    if (electrodes) c.geometry.electrodes = *electrodes;
    if (noise) c.noise_level = *noise;
    if (n_train) c.n_train = *n_train;
    if (n_val) c.n_val = *n_val;
    if (epochs) c.training.max_epochs = *epochs;
    if (method) c.solver.method = *method;
    c.validate();

    if (*mesh) cmd_mesh(c, out);
    else if (*simulate) cmd_simulate(c, mesh_path, phantom_path, out);
    else if (*dataset) cmd_dataset(c, mesh_path, csv, out);
    else if (*trainc) cmd_train(c, dataset_path, out);
    else if (*recon) cmd_reconstruct(c, mesh_path, meas_path, weights_path, out);
    else if (*bench) cmd_benchmark(c, mesh_path, meas_path, weights_path, repeats, !no_diag, out);
    else if (*plot) cmd_plot(c, mesh_path, values_path, series_path, trace_path, log_y, plot_name, out);
    return kSuccess;
  } catch (const TrainingError& e) {
    err << "training failed: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const NumericalError& e) {
    err << "numerical failure: " << e.what() << '\n';
    return kNumericalFailure;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const DomainError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const ContractError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
  }
  return kUsageError;
}

}  // namespace nnqn::cli
