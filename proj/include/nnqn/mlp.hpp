#pragma once

// Fully connected regression network mapping a model output vector to
// predicted Jacobian singular values, with mini-batch Adam training,
// inverted dropout, L2 weight penalty, early stopping and weight files.

#include "nnqn/binio.hpp"
#include "nnqn/core.hpp"
#include "nnqn/sampler.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <numeric>
#include <ostream>
#include <random>
#include <string>
#include <vector>

namespace nnqn {

enum class Activation { Linear, ReLU, LeakyReLU };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Linear: return "linear";
    case Activation::ReLU: return "relu";
    case Activation::LeakyReLU: return "leaky_relu";
  }
  return "?";
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "linear") return Activation::Linear;
  if (s == "relu") return Activation::ReLU;
  if (s == "leaky_relu") return Activation::LeakyReLU;
  throw FormatError("unknown activation '" + s + "'");
}

struct DenseLayer {
  Mat W;  // out x in
  Vec b;  // out
  Activation act = Activation::Linear;

  Index in() const { return W.cols(); }
  Index out() const { return W.rows(); }
};

namespace detail {

inline void activate(Mat& z, Activation a, double alpha) {
  switch (a) {
    case Activation::Linear: break;
    case Activation::ReLU: z = z.cwiseMax(0.0); break;
    case Activation::LeakyReLU: z = z.unaryExpr([alpha](double v) { return v > 0.0 ? v : alpha * v; }); break;
  }
}

// Derivative of the activation evaluated at the pre-activation z.
inline Mat activation_slope(const Mat& z, Activation a, double alpha) {
  switch (a) {
    case Activation::Linear: return Mat::Ones(z.rows(), z.cols());
    case Activation::ReLU: return (z.array() > 0.0).cast<double>().matrix();
    case Activation::LeakyReLU: return z.unaryExpr([alpha](double v) { return v > 0.0 ? 1.0 : alpha; });
  }
  return {};
}

}  // namespace detail

/// Network with input standardization and per-output target scale:
/// prediction = out_scale .* net((x - in_shift) ./ in_scale).
class MLP {
 public:
  MLP() = default;

  /// Layer sizes dims[0] -> ... -> dims.back(); one activation per layer.
  MLP(const std::vector<Index>& dims, const std::vector<Activation>& acts, double leaky_alpha = 0.1)
      : alpha_(leaky_alpha) {
    require(dims.size() >= 2 && acts.size() == dims.size() - 1, "MLP: need one activation per layer");
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
      require(dims[l] > 0 && dims[l + 1] > 0, "MLP: layer sizes must be positive");
      layers_.push_back({Mat::Zero(dims[l + 1], dims[l]), Vec::Zero(dims[l + 1]), acts[l]});
    }
    in_shift_ = Vec::Zero(dims.front());
    in_scale_ = Vec::Ones(dims.front());
    out_scale_ = Vec::Ones(dims.back());
  }

  /// [m, 300, 300, 300, m] with LeakyReLU, LeakyReLU, ReLU hidden layers and
  /// a ReLU output.
  static MLP singular_value_network(Index m, Index hidden = 300) {
    return MLP({m, hidden, hidden, hidden, m},
               {Activation::LeakyReLU, Activation::LeakyReLU, Activation::ReLU, Activation::ReLU});
  }

  Index n_inputs() const { return layers_.front().in(); }
  Index n_outputs() const { return layers_.back().out(); }
  double leaky_alpha() const { return alpha_; }
  std::vector<DenseLayer>& layers() { return layers_; }
  const std::vector<DenseLayer>& layers() const { return layers_; }
  Vec& in_shift() { return in_shift_; }
  Vec& in_scale() { return in_scale_; }
  Vec& out_scale() { return out_scale_; }
  const Vec& in_shift() const { return in_shift_; }
  const Vec& in_scale() const { return in_scale_; }
  const Vec& out_scale() const { return out_scale_; }

  /// Scaled fan-in uniform initialization: W ~ U(-sqrt(6/fan_in), +sqrt(6/fan_in)), b = 0.
  void initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& L : layers_) {
      const double lim = std::sqrt(6.0 / static_cast<double>(L.in()));
      std::uniform_real_distribution<double> u(-lim, lim);
      for (Index i = 0; i < L.W.size(); ++i) L.W.data()[i] = u(rng);
      L.b.setZero();
    }
  }

  /// Network output for standardized inputs, columns are samples.
  Mat forward_normalized(const Mat& xn, std::mt19937_64* dropout_rng = nullptr, double dropout = 0.0) const {
    Mat a = xn;
    for (size_t l = 0; l < layers_.size(); ++l) {
      Mat z = layers_[l].W * a;
      z.colwise() += layers_[l].b;
      detail::activate(z, layers_[l].act, alpha_);
      if (dropout_rng && dropout > 0.0 && l + 1 < layers_.size()) apply_dropout(z, *dropout_rng, dropout);
      a = std::move(z);
    }
    return a;
  }

  Mat standardize(const Mat& x) const {
    require(x.rows() == n_inputs(), "MLP: input has " + std::to_string(x.rows()) + " features, expected " +
                                        std::to_string(n_inputs()));
    return (x.colwise() - in_shift_).array().colwise() / in_scale_.array();
  }

  /// Predictions for the columns of x (dropout disabled unless an rng is given).
  Mat forward(const Mat& x, std::mt19937_64* dropout_rng = nullptr, double dropout = 0.0) const {
    return out_scale_.asDiagonal() * forward_normalized(standardize(x), dropout_rng, dropout);
  }

  Vec predict(const Vec& x) const { return forward(Mat(x)).col(0); }

  double weight_norm_sq() const {
    double s = 0.0;
    for (const auto& L : layers_) s += L.W.squaredNorm();
    return s;
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& L : layers_) n += L.W.size() + L.b.size();
    return n;
  }

  static void apply_dropout(Mat& z, std::mt19937_64& rng, double rate) {
    std::bernoulli_distribution keep(1.0 - rate);
    const double inv = 1.0 / (1.0 - rate);
    for (Index i = 0; i < z.size(); ++i) z.data()[i] = keep(rng) ? z.data()[i] * inv : 0.0;
  }

 private:
  std::vector<DenseLayer> layers_;
  double alpha_ = 0.1;
  Vec in_shift_, in_scale_, out_scale_;
};

/// Non-negative singular values for one model output (dropout disabled).
inline Vec predict_singular_values(const MLP& net, const Vec& model_output) {
  require(model_output.size() == net.n_inputs(), "predict_singular_values: input length mismatch");
  return net.predict(model_output);
}

/// Mean over batch and entries of (prediction - target)^2 in the model's
/// target scale, plus kappa * sum ||W||^2 (biases excluded). Columns are samples.
inline double mlp_loss(const MLP& net, const Mat& x, const Mat& y, double kappa) {
  require(x.cols() == y.cols() && y.rows() == net.n_outputs(), "mlp_loss: shape mismatch");
  const Mat z = net.forward_normalized(net.standardize(x));
  const Mat t = net.out_scale().cwiseInverse().asDiagonal() * y;
  return (z - t).squaredNorm() / static_cast<double>(y.size()) + kappa * net.weight_norm_sq();
}

struct LayerGradient {
  Mat dW;
  Vec db;
};

/// Loss and gradients for one batch. With a dropout rng, the same masks are
/// used in the forward and backward pass.
inline double mlp_loss_and_gradient(const MLP& net, const Mat& x, const Mat& y, double kappa,
                                    std::vector<LayerGradient>& grads, std::mt19937_64* dropout_rng = nullptr,
                                    double dropout = 0.0) {
  require(x.cols() == y.cols() && y.rows() == net.n_outputs(), "mlp_loss: shape mismatch");
  const auto& layers = net.layers();
  const size_t n_layers = layers.size();
  std::vector<Mat> acts(n_layers + 1), pre(n_layers), masks(n_layers);
  acts[0] = net.standardize(x);
  for (size_t l = 0; l < n_layers; ++l) {
    pre[l] = layers[l].W * acts[l];
    pre[l].colwise() += layers[l].b;
    Mat a = pre[l];
    detail::activate(a, layers[l].act, net.leaky_alpha());
    if (dropout_rng && dropout > 0.0 && l + 1 < n_layers) {
      masks[l] = Mat::Ones(a.rows(), a.cols());
      MLP::apply_dropout(masks[l], *dropout_rng, dropout);
      a.array() *= masks[l].array();
    }
    acts[l + 1] = std::move(a);
  }
  const Mat t = net.out_scale().cwiseInverse().asDiagonal() * y;
  const Mat resid = acts[n_layers] - t;
  const double n_entries = static_cast<double>(y.size());
  const double loss = resid.squaredNorm() / n_entries + kappa * net.weight_norm_sq();

  grads.resize(n_layers);
  Mat delta = (2.0 / n_entries) * resid;  // dL/da for the last layer
  for (size_t l = n_layers; l-- > 0;) {
    if (masks[l].size()) delta.array() *= masks[l].array();
    delta.array() *= detail::activation_slope(pre[l], layers[l].act, net.leaky_alpha()).array();
    grads[l].dW.noalias() = delta * acts[l].transpose();
    grads[l].dW += 2.0 * kappa * layers[l].W;
    grads[l].db = delta.rowwise().sum();
    if (l > 0) delta = layers[l].W.transpose() * delta;
  }
  return loss;
}

struct TrainingConfig {
  double initial_lr = 1e-4;
  int lr_patience = 5;  // epochs without validation improvement before halving
  double lr_factor = 0.5;
  double l2_kappa = 1e-3;
  double dropout_rate = 0.2;
  int batch_size = 64;
  int max_epochs = 500;
  double early_stop_tol = 1e-2;
  int early_stop_patience = 3;  // consecutive epochs below tolerance
  bool normalize_targets = true;
  double output_init_gain = 0.0;  // multiplies the output layer's initial weights
  std::uint64_t rng_seed = 0;

  void validate() const {
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) throw ConfigError("dropout_rate must be in [0, 1)");
    if (!(initial_lr > 0.0)) throw ConfigError("initial_lr must be positive");
    if (!(output_init_gain >= 0.0)) throw ConfigError("output_init_gain must be non-negative");
    if (!(l2_kappa >= 0.0)) throw ConfigError("l2_kappa must be non-negative");
    if (batch_size < 1 || max_epochs < 0) throw ConfigError("batch_size must be >= 1 and max_epochs >= 0");
    if (!(early_stop_tol >= 0.0) || early_stop_patience < 1 || lr_patience < 1)
      throw ConfigError("early-stop and schedule settings must be positive");
    if (!(lr_factor > 0.0 && lr_factor <= 1.0)) throw ConfigError("lr_factor must be in (0, 1]");
  }
};

inline nlohmann::json to_json(const TrainingConfig& c) {
  return {{"initial_lr", c.initial_lr},       {"lr_patience", c.lr_patience},
          {"lr_factor", c.lr_factor},         {"l2_kappa", c.l2_kappa},
          {"dropout_rate", c.dropout_rate},   {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},       {"early_stop_tol", c.early_stop_tol},
          {"early_stop_patience", c.early_stop_patience}, {"normalize_targets", c.normalize_targets},
          {"output_init_gain", c.output_init_gain},
          {"seed", c.rng_seed}};
}

struct EpochRecord {
  int epoch = 0;  // 0 = before the first update
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct TrainingHistory {
  std::vector<EpochRecord> epochs;
  int best_epoch = 0;
  bool early_stopped = false;
  double seconds = 0.0;
};

struct TrainingError : NumericalError {
  TrainingError(const std::string& what, TrainingHistory h) : NumericalError(what), history(std::move(h)) {}
  TrainingHistory history;
};

inline void write_history_csv(std::ostream& os, const TrainingHistory& h) {
  os << "epoch,train_loss,val_loss,lr\n" << std::setprecision(17);
  for (const auto& e : h.epochs) os << e.epoch << ',' << e.train_loss << ',' << e.val_loss << ',' << e.lr << '\n';
}

/// Sets the input standardization from the training rows and, when
/// requested, a per-output target scale: the training standard deviation,
/// floored at 1e-3 of the output's mean and 1e-8 of the largest mean. The
/// output bias starts at the mean scaled target.
inline void fit_normalizers(MLP& net, const Mat& x_train, const Mat& y_train, bool normalize_targets) {
  const double n = static_cast<double>(x_train.cols());
  net.in_shift() = x_train.rowwise().mean();
  Vec var = (x_train.colwise() - net.in_shift()).rowwise().squaredNorm() / n;
  net.in_scale() = var.cwiseSqrt().unaryExpr([](double s) { return s > 0.0 ? s : 1.0; });
  if (normalize_targets) {
    const Vec mean = y_train.rowwise().mean();
    const Vec sd = ((y_train.colwise() - mean).rowwise().squaredNorm() / n).cwiseSqrt();
    const double floor = 1e-8 * std::max(mean.maxCoeff(), std::numeric_limits<double>::min());
    net.out_scale() = sd.cwiseMax(1e-3 * mean).cwiseMax(floor);
    net.layers().back().b = (mean.array() / net.out_scale().array()).matrix();
  } else {
    net.out_scale().setOnes();
  }
}

/// Mini-batch Adam (beta = 0.9, 0.999) on the training rows of `data`;
/// returns the weights with the lowest validation loss.
inline TrainingHistory train(MLP& net, const TrainingSet& data, const TrainingConfig& cfg,
                             const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  data.validate_shapes();
  require(data.width() == net.n_inputs() && data.width() == net.n_outputs(), "train: dataset width mismatch");
  if (data.n_train < 1 || data.n_val < 1) throw ConfigError("train: dataset needs training and validation rows");
  const auto t0 = std::chrono::steady_clock::now();
  const Mat x_train = data.inputs.topRows(data.n_train).transpose();
  const Mat y_train = data.targets.topRows(data.n_train).transpose();
  const Mat x_val = data.inputs.bottomRows(data.n_val).transpose();
  const Mat y_val = data.targets.bottomRows(data.n_val).transpose();

  net.initialize(cfg.rng_seed);
  net.layers().back().W *= cfg.output_init_gain;
  fit_normalizers(net, x_train, y_train, cfg.normalize_targets);

  auto& layers = net.layers();
  std::vector<LayerGradient> m1(layers.size()), m2(layers.size()), grads;
  for (size_t l = 0; l < layers.size(); ++l) {
    m1[l] = {Mat::Zero(layers[l].out(), layers[l].in()), Vec::Zero(layers[l].out())};
    m2[l] = m1[l];
  }
  constexpr double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::mt19937_64 rng(cfg.rng_seed ^ 0x5DEECE66Dull);
  std::vector<Index> order(static_cast<size_t>(data.n_train));
  std::iota(order.begin(), order.end(), Index{0});

  TrainingHistory hist;
  double lr = cfg.initial_lr;
  auto record = [&](int epoch) {
    EpochRecord r{epoch, mlp_loss(net, x_train, y_train, cfg.l2_kappa), mlp_loss(net, x_val, y_val, cfg.l2_kappa), lr};
    hist.epochs.push_back(r);
    if (on_epoch) on_epoch(r);
    if (!std::isfinite(r.train_loss) || !std::isfinite(r.val_loss)) {
      hist.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      throw TrainingError("training diverged at epoch " + std::to_string(epoch), hist);
    }
    return r;
  };

  record(0);
  MLP best = net;
  double best_val = hist.epochs[0].val_loss;
  int since_improve = 0, calm = 0;
  long step = 0;
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(cfg.batch_size)) {
      const size_t stop = std::min(order.size(), start + static_cast<size_t>(cfg.batch_size));
      Mat xb(x_train.rows(), static_cast<Index>(stop - start)), yb(y_train.rows(), xb.cols());
      for (size_t k = start; k < stop; ++k) {
        xb.col(static_cast<Index>(k - start)) = x_train.col(order[k]);
        yb.col(static_cast<Index>(k - start)) = y_train.col(order[k]);
      }
      mlp_loss_and_gradient(net, xb, yb, cfg.l2_kappa, grads, &rng, cfg.dropout_rate);
      ++step;
      const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
      for (size_t l = 0; l < layers.size(); ++l) {
        m1[l].dW = beta1 * m1[l].dW + (1 - beta1) * grads[l].dW;
        m2[l].dW = beta2 * m2[l].dW + (1 - beta2) * grads[l].dW.cwiseAbs2();
        m1[l].db = beta1 * m1[l].db + (1 - beta1) * grads[l].db;
        m2[l].db = beta2 * m2[l].db + (1 - beta2) * grads[l].db.cwiseAbs2();
        layers[l].W.array() -= lr * (m1[l].dW.array() / c1) / ((m2[l].dW.array() / c2).sqrt() + adam_eps);
        layers[l].b.array() -= lr * (m1[l].db.array() / c1) / ((m2[l].db.array() / c2).sqrt() + adam_eps);
      }
    }
    const double prev_val = hist.epochs.back().val_loss;
    const EpochRecord r = record(epoch);
    if (r.val_loss < best_val) {
      best_val = r.val_loss;
      best = net;
      hist.best_epoch = epoch;
      since_improve = 0;
    } else if (++since_improve >= cfg.lr_patience) {
      lr *= cfg.lr_factor;
      since_improve = 0;
    }
    const double rel = std::abs(r.val_loss - prev_val) / std::max(prev_val, std::numeric_limits<double>::min());
    calm = rel < cfg.early_stop_tol ? calm + 1 : 0;
    if (calm >= cfg.early_stop_patience) {
      hist.early_stopped = true;
      break;
    }
  }
  net = std::move(best);
  hist.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return hist;
}

inline constexpr char kWeightsMagic[5] = "NNQN";
inline constexpr std::uint32_t kWeightsVersion = 1;

inline void save_weights(const std::string& path, const MLP& net, const nlohmann::json& extra = {}) {
  nlohmann::json h;
  std::vector<Index> dims{net.n_inputs()};
  std::vector<std::string> acts;
  for (const auto& L : net.layers()) {
    dims.push_back(L.out());
    acts.push_back(to_string(L.act));
  }
  h["dims"] = dims;
  h["activations"] = acts;
  h["leaky_alpha"] = net.leaky_alpha();
  h["normalizer"] = {{"input", "standardize"}, {"output", "scale"}};
  h["loss"] = "mean over batch and entries of squared error in output-scaled units, plus kappa * sum ||W||^2";
  h["layout"] = "per layer: W row-major then b; then in_shift, in_scale, out_scale";
  if (!extra.is_null()) h["extra"] = extra;
  std::vector<double> p;
  p.reserve(static_cast<size_t>(net.parameter_count() + 3 * net.n_inputs()));
  for (const auto& L : net.layers()) {
    for (Index i = 0; i < L.W.rows(); ++i)
      for (Index j = 0; j < L.W.cols(); ++j) p.push_back(L.W(i, j));
    p.insert(p.end(), L.b.data(), L.b.data() + L.b.size());
  }
  for (const Vec* v : {&net.in_shift(), &net.in_scale(), &net.out_scale()}) p.insert(p.end(), v->data(), v->data() + v->size());
  write_blob(path, kWeightsMagic, kWeightsVersion, h, p);
}

inline MLP load_weights(const std::string& path, nlohmann::json* header_out = nullptr) {
  BinaryBlob b = read_blob(path, kWeightsMagic, kWeightsVersion);
  MLP net;
  try {
    const auto dims = b.header.at("dims").get<std::vector<Index>>();
    std::vector<Activation> acts;
    for (const auto& a : b.header.at("activations")) acts.push_back(activation_from_string(a.get<std::string>()));
    if (dims.size() < 2 || acts.size() + 1 != dims.size()) throw FormatError(path + ": inconsistent layer description");
    for (Index d : dims)
      if (d <= 0) throw FormatError(path + ": non-positive layer size");
    net = MLP(dims, acts, b.header.at("leaky_alpha").get<double>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": bad weight header: " + e.what());
  } catch (const ContractError& e) {
    throw FormatError(path + ": " + e.what());
  }
  const size_t expected =
      static_cast<size_t>(net.parameter_count() + 2 * net.n_inputs() + net.n_outputs());
  if (b.payload.size() != expected)
    throw FormatError(path + ": payload has " + std::to_string(b.payload.size()) + " values, header implies " +
                      std::to_string(expected));
  size_t k = 0;
  for (auto& L : net.layers()) {
    for (Index i = 0; i < L.W.rows(); ++i)
      for (Index j = 0; j < L.W.cols(); ++j) L.W(i, j) = b.payload[k++];
    for (Index i = 0; i < L.b.size(); ++i) L.b[i] = b.payload[k++];
  }
  for (Vec* v : {&net.in_shift(), &net.in_scale(), &net.out_scale()})
    for (Index i = 0; i < v->size(); ++i) (*v)[i] = b.payload[k++];
  if (header_out) *header_out = b.header;
  return net;
}

/// Predictor callback for the NN-QN driver (same signature as SingularValueSource).
inline std::function<Vec(const Vec&, const Vec&)> mlp_singular_value_source(std::shared_ptr<const MLP> net) {
  require(net != nullptr, "mlp_singular_value_source: null network");
  return [net](const Vec& output, const Vec&) { return predict_singular_values(*net, output); };
}

/// Elementwise |pred - truth| / max(truth, floor_rel * truth_0) over the
/// leading `count` values. The floor keeps the rank-deficient tail (true
/// values at rounding level) from dominating the statistics.
inline Vec singular_value_relative_errors(const Vec& pred, const Vec& truth, Index count,
                                          double floor_rel = 1e-8) {
  require(pred.size() == truth.size() && count > 0 && count <= truth.size(),
          "singular_value_relative_errors: bad sizes");
  const double floor = std::max(floor_rel * truth[0], std::numeric_limits<double>::min());
  Vec e(count);
  for (Index j = 0; j < count; ++j) e[j] = std::abs(pred[j] - truth[j]) / std::max(truth[j], floor);
  return e;
}

inline double median(std::vector<double> v) {
  require(!v.empty(), "median of empty set");
  const size_t mid = v.size() / 2;
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid), v.end());
  if (v.size() % 2 == 1) return v[mid];
  const double hi = v[mid];
  return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(mid)));
}

struct PredictionReport {
  double median_top = 0.0;  // median relative error over the leading `top` values
  double median_all = 0.0;  // median relative error over every value
  Index top = 0;
  Index samples = 0;
};

/// Pools relative errors over the validation rows of `data`.
inline PredictionReport evaluate_predictor(const MLP& net, const TrainingSet& data, Index top = 32,
                                           double floor_rel = 1e-8) {
  data.validate_shapes();
  require(data.n_val > 0 && top <= data.width(), "evaluate_predictor: needs validation rows");
  const Mat x = data.inputs.bottomRows(data.n_val).transpose();
  const Mat pred = net.forward(x);
  std::vector<double> e_top, e_all;
  for (Index i = 0; i < data.n_val; ++i) {
    const Vec truth = data.targets.row(data.n_train + i).transpose();
    const Vec e = singular_value_relative_errors(pred.col(i), truth, truth.size(), floor_rel);
    e_top.insert(e_top.end(), e.data(), e.data() + top);
    e_all.insert(e_all.end(), e.data(), e.data() + e.size());
  }
  return {median(std::move(e_top)), median(std::move(e_all)), top, data.n_val};
}

}  // namespace nnqn
