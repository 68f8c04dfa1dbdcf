#pragma once

// Small ReLU regressors for (mu, sigma): independent (M_I), shared first
// layer (M_S), fully shared (M_F) and the single-target baseline (B).
// Parameters live in one flat vector; layers form a tree rooted at the input.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "betacons/beta_model.hpp"
#include "betacons/errors.hpp"
#include "betacons/rng.hpp"
#include "json.hpp"

namespace betacons {

enum class VariantKind { kIndependent, kSharedFirst, kFullyShared, kBaseline };

inline std::string variant_name(VariantKind k) {
  switch (k) {
    case VariantKind::kIndependent: return "M_I";
    case VariantKind::kSharedFirst: return "M_S";
    case VariantKind::kFullyShared: return "M_F";
    case VariantKind::kBaseline: return "B";
  }
  return "?";
}

inline VariantKind parse_variant(const std::string& s) {
  if (s == "M_I") return VariantKind::kIndependent;
  if (s == "M_S") return VariantKind::kSharedFirst;
  if (s == "M_F") return VariantKind::kFullyShared;
  if (s == "B") return VariantKind::kBaseline;
  throw DomainError("unknown variant '" + s + "' (expected M_I, M_S, M_F or B)");
}

// floor(x + 1/2); exact for the quarter and half multiples used here.
inline int round_half_up(double x) { return static_cast<int>(std::floor(x + 0.5)); }

enum class Activation { kRelu, kIdentity };

struct LayerSpec {
  int in_dim = 0;
  int out_dim = 0;
  Activation activation = Activation::kRelu;
};

struct NetworkVariant {
  VariantKind kind = VariantKind::kFullyShared;
  int input_dim = 0;

  int hidden1() const { return round_half_up(0.75 * input_dim); }
  int hidden2() const { return round_half_up(0.5 * input_dim); }
  int n_outputs() const { return kind == VariantKind::kBaseline ? 1 : 2; }

  void validate() const {
    if (input_dim < 2) throw DomainError("NetworkVariant: input_dim must be >= 2, got " + std::to_string(input_dim));
  }

  /// Closed-form parameter count.
  std::size_t parameter_count() const {
    const auto d = static_cast<std::size_t>(input_dim);
    const auto h1 = static_cast<std::size_t>(hidden1());
    const auto h2 = static_cast<std::size_t>(hidden2());
    const std::size_t first = d * h1 + h1;
    const std::size_t second = h1 * h2 + h2;
    switch (kind) {
      case VariantKind::kIndependent: return 2 * (first + second + h2 + 1);
      case VariantKind::kSharedFirst: return first + 2 * (second + h2 + 1);
      case VariantKind::kFullyShared: return first + second + 2 * h2 + 2;
      case VariantKind::kBaseline: return first + second + h2 + 1;
    }
    return 0;
  }
};

struct TrainConfig {
  double learning_rate = 1e-3;
  int batch_size = 128;
  int max_epochs = 50;
  int patience = 5;
  std::uint64_t seed = 0;
  double min_delta = 1e-6;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    auto fail = [](const std::string& what) { throw DomainError("TrainConfig: " + what); };
    if (!(learning_rate > 0.0)) fail("learning_rate must be positive");
    if (batch_size < 1) fail("batch_size must be positive");
    if (max_epochs < 1) fail("max_epochs must be positive");
    if (patience < 1) fail("patience must be positive");
    if (!(min_delta >= 0.0)) fail("min_delta must be non-negative");
  }
};

/// One output row. B nets carry a single scalar in mu_hat.
struct Prediction {
  double mu_hat = 0.0;
  std::optional<double> sigma_hat;
};

namespace detail {

inline double logistic_stable(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

inline double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

enum : std::uint64_t { kTagInit = 11, kTagShuffle = 12 };

}  // namespace detail

class Network {
 public:
  struct Layer {
    std::string name;
    LayerSpec spec;
    int parent = -1;  // -1: network input
    Eigen::Index weight_offset = 0;  // out x in, column-major
    Eigen::Index bias_offset = 0;
  };
  // Output column j is column `column` of layer `layer`.
  struct Head {
    int layer = 0;
    int column = 0;
  };

  static Network build(const NetworkVariant& variant, std::uint64_t seed) {
    variant.validate();
    Network net;
    net.variant_ = variant;
    const int d = variant.input_dim;
    const int h1 = variant.hidden1();
    const int h2 = variant.hidden2();
    auto relu = Activation::kRelu;
    auto ident = Activation::kIdentity;
    switch (variant.kind) {
      case VariantKind::kIndependent: {
        for (const char* tag : {"mu", "sigma"}) {
          const int a = net.add_layer(std::string(tag) + ".l1", {d, h1, relu}, -1);
          const int b = net.add_layer(std::string(tag) + ".l2", {h1, h2, relu}, a);
          const int o = net.add_layer(std::string(tag) + ".out", {h2, 1, ident}, b);
          net.heads_.push_back({o, 0});
        }
        break;
      }
      case VariantKind::kSharedFirst: {
        const int a = net.add_layer("shared.l1", {d, h1, relu}, -1);
        for (const char* tag : {"mu", "sigma"}) {
          const int b = net.add_layer(std::string(tag) + ".l2", {h1, h2, relu}, a);
          const int o = net.add_layer(std::string(tag) + ".out", {h2, 1, ident}, b);
          net.heads_.push_back({o, 0});
        }
        break;
      }
      case VariantKind::kFullyShared: {
        const int a = net.add_layer("shared.l1", {d, h1, relu}, -1);
        const int b = net.add_layer("shared.l2", {h1, h2, relu}, a);
        const int o = net.add_layer("out", {h2, 2, ident}, b);
        net.heads_.push_back({o, 0});
        net.heads_.push_back({o, 1});
        break;
      }
      case VariantKind::kBaseline: {
        const int a = net.add_layer("l1", {d, h1, relu}, -1);
        const int b = net.add_layer("l2", {h1, h2, relu}, a);
        const int o = net.add_layer("out", {h2, 1, ident}, b);
        net.heads_.push_back({o, 0});
        break;
      }
    }
    net.params_ = Eigen::VectorXd::Zero(net.size_);
    Rng rng(seed, {detail::kTagInit});
    for (const auto& l : net.layers_) {
      const double limit = std::sqrt(6.0 / l.spec.in_dim);
      const Eigen::Index n = static_cast<Eigen::Index>(l.spec.in_dim) * l.spec.out_dim;
      for (Eigen::Index i = 0; i < n; ++i) net.params_[l.weight_offset + i] = rng.uniform(-limit, limit);
    }
    return net;
  }

  const NetworkVariant& variant() const noexcept { return variant_; }
  const std::vector<Layer>& layers() const noexcept { return layers_; }
  const std::vector<Head>& heads() const noexcept { return heads_; }
  std::size_t parameter_count() const noexcept { return static_cast<std::size_t>(params_.size()); }
  Eigen::VectorXd& parameters() noexcept { return params_; }
  const Eigen::VectorXd& parameters() const noexcept { return params_; }

  Eigen::Map<const Eigen::MatrixXd> weights(const Layer& l) const {
    return {params_.data() + l.weight_offset, l.spec.out_dim, l.spec.in_dim};
  }
  Eigen::Map<const Eigen::VectorXd> bias(const Layer& l) const { return {params_.data() + l.bias_offset, l.spec.out_dim}; }

  // Per-layer post-activation outputs (rows = samples).
  struct Cache {
    std::vector<Eigen::MatrixXd> acts;
  };

  /// Pre-squash outputs, one column per head.
  Eigen::MatrixXd forward_raw(const Eigen::MatrixXd& x, Cache* cache = nullptr) const {
    check_input(x);
    std::vector<Eigen::MatrixXd> acts(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = layers_[i];
      const Eigen::MatrixXd& in = l.parent < 0 ? x : acts[static_cast<std::size_t>(l.parent)];
      Eigen::MatrixXd z = in * weights(l).transpose();
      z.rowwise() += bias(l).transpose();
      if (l.spec.activation == Activation::kRelu) z = z.cwiseMax(0.0);
      acts[i] = std::move(z);
    }
    Eigen::MatrixXd out(x.rows(), static_cast<Eigen::Index>(heads_.size()));
    for (std::size_t j = 0; j < heads_.size(); ++j) {
      out.col(static_cast<Eigen::Index>(j)) = acts[static_cast<std::size_t>(heads_[j].layer)].col(heads_[j].column);
    }
    if (cache != nullptr) cache->acts = std::move(acts);
    return out;
  }

  /// Squashed outputs: column 0 logistic (mu), column 1 softplus (sigma);
  /// B nets are left as identity.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x) const { return squash(forward_raw(x)); }

  Eigen::MatrixXd squash(Eigen::MatrixXd raw) const {
    if (variant_.kind == VariantKind::kBaseline) return raw;
    raw.col(0) = raw.col(0).unaryExpr(&detail::logistic_stable);
    raw.col(1) = raw.col(1).unaryExpr(&detail::softplus);
    return raw;
  }

  std::vector<Prediction> predict(const Eigen::MatrixXd& x) const {
    const Eigen::MatrixXd y = forward(x);
    std::vector<Prediction> out(static_cast<std::size_t>(y.rows()));
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
      out[static_cast<std::size_t>(i)].mu_hat = y(i, 0);
      if (y.cols() > 1) out[static_cast<std::size_t>(i)].sigma_hat = y(i, 1);
    }
    return out;
  }

  /// Loss on (x, y) and its gradient with respect to every parameter.
  double loss_and_gradient(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, Eigen::VectorXd& grad) const {
    check_targets(x, y);
    Cache cache;
    const Eigen::MatrixXd raw = forward_raw(x, &cache);
    const Eigen::MatrixXd pred = squash(raw);
    const auto n = static_cast<double>(x.rows());
    const Eigen::MatrixXd diff = pred - y;
    const double loss = diff.squaredNorm() / n;

    Eigen::MatrixXd d_raw = (2.0 / n) * diff;
    if (variant_.kind != VariantKind::kBaseline) {
      d_raw.col(0).array() *= pred.col(0).array() * (1.0 - pred.col(0).array());
      d_raw.col(1).array() *= raw.col(1).unaryExpr(&detail::logistic_stable).array();
    }

    grad = Eigen::VectorXd::Zero(params_.size());
    std::vector<Eigen::MatrixXd> d_act(layers_.size());
    for (std::size_t i = 0; i < layers_.size(); ++i) d_act[i] = Eigen::MatrixXd::Zero(x.rows(), layers_[i].spec.out_dim);
    for (std::size_t j = 0; j < heads_.size(); ++j) {
      d_act[static_cast<std::size_t>(heads_[j].layer)].col(heads_[j].column) += d_raw.col(static_cast<Eigen::Index>(j));
    }
    for (std::size_t r = layers_.size(); r-- > 0;) {
      const auto& l = layers_[r];
      Eigen::MatrixXd dz = std::move(d_act[r]);
      if (l.spec.activation == Activation::kRelu) dz.array() *= (cache.acts[r].array() > 0.0).cast<double>();
      const Eigen::MatrixXd& in = l.parent < 0 ? x : cache.acts[static_cast<std::size_t>(l.parent)];
      Eigen::Map<Eigen::MatrixXd>(grad.data() + l.weight_offset, l.spec.out_dim, l.spec.in_dim) += dz.transpose() * in;
      Eigen::Map<Eigen::VectorXd>(grad.data() + l.bias_offset, l.spec.out_dim) += dz.colwise().sum().transpose();
      if (l.parent >= 0) d_act[static_cast<std::size_t>(l.parent)] += dz * weights(l);
    }
    return loss;
  }

  double loss(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) const {
    check_targets(x, y);
    return (forward(x) - y).squaredNorm() / static_cast<double>(x.rows());
  }

 private:
  int add_layer(std::string name, LayerSpec spec, int parent) {
    Layer l{std::move(name), spec, parent, size_, 0};
    size_ += static_cast<Eigen::Index>(spec.in_dim) * spec.out_dim;
    l.bias_offset = size_;
    size_ += spec.out_dim;
    layers_.push_back(std::move(l));
    return static_cast<int>(layers_.size()) - 1;
  }

  void check_input(const Eigen::MatrixXd& x) const {
    if (x.cols() != variant_.input_dim) {
      throw ShapeError("network expects " + std::to_string(variant_.input_dim) + " features, got " +
                       std::to_string(x.cols()));
    }
  }
  void check_targets(const Eigen::MatrixXd& x, const Eigen::MatrixXd& y) const {
    check_input(x);
    if (y.rows() != x.rows() || y.cols() != variant_.n_outputs()) {
      throw ShapeError("targets must be " + std::to_string(x.rows()) + " x " + std::to_string(variant_.n_outputs()) +
                       ", got " + std::to_string(y.rows()) + " x " + std::to_string(y.cols()));
    }
  }

  NetworkVariant variant_;
  std::vector<Layer> layers_;
  std::vector<Head> heads_;
  Eigen::Index size_ = 0;
  Eigen::VectorXd params_;
};

/// Joint loss: MSE(mu_hat, mu) + MSE(sigma_hat, sigma); plain MSE for B.
inline double joint_loss(const std::vector<Prediction>& predictions, const std::vector<MomentPair>& targets) {
  if (predictions.size() != targets.size()) throw ShapeError("joint_loss: batch size mismatch");
  if (predictions.empty()) throw ShapeError("joint_loss: empty batch");
  double acc = 0.0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const double dm = predictions[i].mu_hat - targets[i].mu;
    acc += dm * dm;
    if (predictions[i].sigma_hat) {
      const double ds = *predictions[i].sigma_hat - targets[i].sigma;
      acc += ds * ds;
    }
  }
  return acc / static_cast<double>(predictions.size());
}

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long step = 0;
};

/// One Adam step on the batch. Returns the batch loss before the update.
inline double backward_and_step(Network& net, const Eigen::MatrixXd& x, const Eigen::MatrixXd& y, AdamState& state,
                                const TrainConfig& cfg) {
  Eigen::VectorXd grad;
  const double loss = net.loss_and_gradient(x, y, grad);
  if (!std::isfinite(loss) || !grad.allFinite()) {
    throw TrainingError("non-finite gradient at Adam step " + std::to_string(state.step + 1) +
                        " (loss=" + detail::fmt_real(loss) + ")");
  }
  auto& p = net.parameters();
  if (state.m.size() != p.size()) {
    state.m = Eigen::VectorXd::Zero(p.size());
    state.v = Eigen::VectorXd::Zero(p.size());
    state.step = 0;
  }
  ++state.step;
  state.m = cfg.adam_beta1 * state.m + (1.0 - cfg.adam_beta1) * grad;
  state.v = cfg.adam_beta2 * state.v + (1.0 - cfg.adam_beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(cfg.adam_beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.adam_beta2, static_cast<double>(state.step));
  p.array() -= cfg.learning_rate * (state.m.array() / c1) / ((state.v.array() / c2).sqrt() + cfg.adam_eps);
  return loss;
}

/// Stop after `patience` epochs without a validation loss at least
/// `min_delta` below the best so far.
class EarlyStopping {
 public:
  EarlyStopping(int patience, double min_delta) : patience_(patience), min_delta_(min_delta) {}

  // Returns true when training should stop after this epoch.
  bool update(double val_loss, int epoch) {
    if (val_loss < best_ - min_delta_) {
      best_ = val_loss;
      best_epoch_ = epoch;
      since_ = 0;
      improved_ = true;
    } else {
      ++since_;
      improved_ = false;
    }
    return since_ >= patience_;
  }

  bool improved() const noexcept { return improved_; }
  double best() const noexcept { return best_; }
  int best_epoch() const noexcept { return best_epoch_; }

 private:
  int patience_;
  double min_delta_;
  double best_ = std::numeric_limits<double>::infinity();
  int best_epoch_ = 0;
  int since_ = 0;
  bool improved_ = false;
};

struct TrainHistory {
  std::vector<double> train_loss;
  std::vector<double> val_loss;
  int best_epoch = 0;  // 1-based
  int epochs_run = 0;
  bool early_stopped = false;
};

inline Eigen::MatrixXd gather_rows(const Eigen::MatrixXd& m, const std::vector<Eigen::Index>& idx, std::size_t b,
                                   std::size_t e) {
  Eigen::MatrixXd out(static_cast<Eigen::Index>(e - b), m.cols());
  for (std::size_t i = b; i < e; ++i) out.row(static_cast<Eigen::Index>(i - b)) = m.row(idx[i]);
  return out;
}

/// Mini-batch Adam with seeded shuffling and early stopping on validation
/// loss; the parameters of the best validation epoch are restored.
inline TrainHistory train(Network& net, const Eigen::MatrixXd& x_train, const Eigen::MatrixXd& y_train,
                          const Eigen::MatrixXd& x_val, const Eigen::MatrixXd& y_val, const TrainConfig& cfg) {
  cfg.validate();
  if (x_train.rows() == 0) throw InsufficientData("train: empty training split");
  if (x_val.rows() == 0) throw InsufficientData("train: empty validation split");
  TrainHistory hist;
  AdamState state;
  EarlyStopping stopper(cfg.patience, cfg.min_delta);
  Eigen::VectorXd best = net.parameters();
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x_train.rows()));
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const auto bs = static_cast<std::size_t>(cfg.batch_size);
  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng(cfg.seed, {detail::kTagShuffle, static_cast<std::uint64_t>(epoch)});
    std::iota(order.begin(), order.end(), Eigen::Index{0});
    rng.shuffle(std::span<Eigen::Index>(order));
    double acc = 0.0;
    for (std::size_t b = 0; b < order.size(); b += bs) {
      const std::size_t e = std::min(order.size(), b + bs);
      const double l = backward_and_step(net, gather_rows(x_train, order, b, e), gather_rows(y_train, order, b, e),
                                         state, cfg);
      acc += l * static_cast<double>(e - b);
    }
    hist.train_loss.push_back(acc / static_cast<double>(order.size()));
    const double val = net.loss(x_val, y_val);
    if (!std::isfinite(val)) throw TrainingError("non-finite validation loss at epoch " + std::to_string(epoch));
    hist.val_loss.push_back(val);
    hist.epochs_run = epoch;
    const bool stop = stopper.update(val, epoch);
    if (stopper.improved()) best = net.parameters();
    if (stop) {
      hist.early_stopped = true;
      break;
    }
  }
  hist.best_epoch = stopper.best_epoch();
  net.parameters() = best;
  return hist;
}

/// Per-column z-normalisation statistics (zero std replaced by 1).
struct Normalization {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;

  static Normalization fit(const Eigen::MatrixXd& x) {
    if (x.rows() == 0) throw InsufficientData("Normalization::fit: no rows");
    Normalization n;
    n.mean = x.colwise().mean().transpose();
    n.std = ((x.rowwise() - n.mean.transpose()).cwiseAbs2().colwise().sum() / static_cast<double>(x.rows()))
                .cwiseSqrt()
                .transpose();
    for (Eigen::Index j = 0; j < n.std.size(); ++j) {
      if (!(n.std[j] > 0.0)) n.std[j] = 1.0;
    }
    return n;
  }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
    if (x.cols() != mean.size()) throw ShapeError("Normalization: column count mismatch");
    return (x.rowwise() - mean.transpose()).array().rowwise() / std.transpose().array();
  }
};

/// JSON checkpoint: manifest plus named parameter tensors.
inline nlohmann::json checkpoint_json(const Network& net, std::uint64_t seed, const TrainConfig& cfg,
                                      const Normalization* norm = nullptr) {
  using nlohmann::json;
  json j;
  j["format"] = "betacons-checkpoint";
  j["version"] = 1;
  j["variant"] = variant_name(net.variant().kind);
  j["input_dim"] = net.variant().input_dim;
  j["hidden"] = {net.variant().hidden1(), net.variant().hidden2()};
  j["seed"] = seed;
  j["train_config"] = {{"learning_rate", cfg.learning_rate}, {"batch_size", cfg.batch_size},
                       {"max_epochs", cfg.max_epochs},       {"patience", cfg.patience},
                       {"min_delta", cfg.min_delta},         {"seed", cfg.seed}};
  json tensors = json::array();
  const auto& p = net.parameters();
  for (const auto& l : net.layers()) {
    const Eigen::Index nw = static_cast<Eigen::Index>(l.spec.in_dim) * l.spec.out_dim;
    tensors.push_back({{"name", l.name + ".weight"},
                       {"shape", {l.spec.out_dim, l.spec.in_dim}},
                       {"order", "column-major"},
                       {"values", std::vector<double>(p.data() + l.weight_offset, p.data() + l.weight_offset + nw)}});
    tensors.push_back({{"name", l.name + ".bias"},
                       {"shape", {l.spec.out_dim}},
                       {"values", std::vector<double>(p.data() + l.bias_offset, p.data() + l.bias_offset + l.spec.out_dim)}});
  }
  j["tensors"] = std::move(tensors);
  if (norm != nullptr) {
    j["normalization"] = {{"mean", std::vector<double>(norm->mean.data(), norm->mean.data() + norm->mean.size())},
                          {"std", std::vector<double>(norm->std.data(), norm->std.data() + norm->std.size())}};
  }
  return j;
}

struct LoadedCheckpoint {
  Network net;
  std::optional<Normalization> normalization;
};

inline LoadedCheckpoint load_checkpoint(const nlohmann::json& j) {
  try {
    if (j.at("format") != "betacons-checkpoint") throw SchemaError("not a betacons checkpoint");
    NetworkVariant v{parse_variant(j.at("variant").get<std::string>()), j.at("input_dim").get<int>()};
    LoadedCheckpoint out{Network::build(v, 0), std::nullopt};
    auto& p = out.net.parameters();
    const auto& tensors = j.at("tensors");
    for (const auto& l : out.net.layers()) {
      const Eigen::Index nw = static_cast<Eigen::Index>(l.spec.in_dim) * l.spec.out_dim;
      for (const auto& [suffix, off, n] : {std::tuple{".weight", l.weight_offset, nw},
                                           std::tuple{".bias", l.bias_offset, Eigen::Index{l.spec.out_dim}}}) {
        const std::string name = l.name + suffix;
        auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& t) { return t.at("name") == name; });
        if (it == tensors.end()) throw SchemaError("checkpoint lacks tensor '" + name + "'");
        const auto values = it->at("values").template get<std::vector<double>>();
        if (static_cast<Eigen::Index>(values.size()) != n) throw ShapeError("checkpoint tensor '" + name + "' has wrong size");
        std::copy(values.begin(), values.end(), p.data() + off);
      }
    }
    if (j.contains("normalization")) {
      const auto m = j["normalization"].at("mean").get<std::vector<double>>();
      const auto s = j["normalization"].at("std").get<std::vector<double>>();
      Normalization norm;
      norm.mean = Eigen::Map<const Eigen::VectorXd>(m.data(), static_cast<Eigen::Index>(m.size()));
      norm.std = Eigen::Map<const Eigen::VectorXd>(s.data(), static_cast<Eigen::Index>(s.size()));
      out.normalization = std::move(norm);
    }
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed checkpoint: ") + e.what());
  }
}

}  // namespace betacons
