#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numbers>
#include <string>
#include <vector>

#include "isonas/dataset.hpp"
#include "isonas/errors.hpp"
#include "isonas/sampler.hpp"
#include "isonas/supernet.hpp"
#include "isonas/tape.hpp"

namespace isonas {

struct SgdConfig {
  double lr = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0;
  bool cosine = true;  // anneal lr to zero over the run

  double rate(std::size_t step, std::size_t total) const {
    if (!cosine || total == 0) return lr;
    return 0.5 * lr * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
  }
};

/// SGD with heavy-ball momentum; velocity buffers are keyed by the parameter vector.
class Sgd {
 public:
  explicit Sgd(SgdConfig cfg) : cfg_(cfg) {}

  void update(std::vector<double>& param, const std::vector<double>& grad, double lr) {
    if (grad.empty()) return;
    if (grad.size() != param.size()) throw DimensionError("gradient length does not match parameter");
    auto& v = velocity_[&param];
    if (v.empty()) v.assign(param.size(), 0.0);
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = grad[i] + cfg_.weight_decay * param[i];
      v[i] = cfg_.momentum * v[i] + g;
      param[i] -= lr * v[i];
    }
  }

  /// Applies every gradient in `grads`; parameters are located by identity.
  void apply(const GradientSet& grads, std::span<BNParams* const> bns, std::span<LayerParams* const> layers,
             double lr) {
    for (BNParams* bn : bns) {
      if (const BNGrad* g = grads.find_bn(bn)) {
        update(bn->gamma, g->gamma, lr);
        update(bn->beta, g->beta, lr);
      }
    }
    for (LayerParams* p : layers) {
      if (const LayerGrad* g = grads.find_layer(p)) {
        update(p->weights, g->weights, lr);
        if (p->has_bias()) update(p->bias, g->bias, lr);
      }
    }
  }

  const SgdConfig& config() const { return cfg_; }

 private:
  SgdConfig cfg_;
  std::map<const void*, std::vector<double>> velocity_;
};

struct TrainConfig {
  std::size_t epochs = 1;
  SgdConfig sgd{};
  std::uint64_t seed = 0;
  bool layer_indicators = true;
  bool calibrate = true;  // reset running statistics from the first batch before training
};

struct StepRecord {
  std::size_t step = 0;
  std::string path;
  double loss = 0.0;
  double lr = 0.0;
};

struct TrainMetrics {
  std::vector<StepRecord> steps;
  std::vector<std::vector<std::size_t>> selection_counts;  // [layer][candidate]
  std::size_t rounds = 0;
  std::size_t layer_path_steps = 0;
};

namespace detail {

inline double path_loss_and_grads(Supernet& net, const Batch& batch, const PathSample& path, ForwardOptions opt,
                                  GradientSet& grads) {
  try {
    Tape tape;
    const Node out = forward_path(tape, tape.input(batch.images), net, path, opt);
    const LossResult loss = softmax_cross_entropy(tape.value(out), batch.labels);
    if (!std::isfinite(loss.loss)) throw NumericError("non-finite loss");
    grads += backward_bn_only(tape, loss.grad);
    return loss.loss;
  } catch (const NumericError& e) {
    throw DivergenceError(std::string("indicator training diverged: ") + e.what() + " on path " + to_string(path),
                          to_string(path));
  }
}

}  // namespace detail

/// Indicator-only training: one strict-fair round per batch. Block paths accumulate
/// their gradients into one update; the layer-indicator path (odd rounds) updates
/// only the layer indicators. Frozen weights are never written.
inline TrainMetrics train_indicators(Supernet& net, const DatasetStream& data, const TrainConfig& cfg,
                                     const std::function<void(const StepRecord&)>& on_step = {}) {
  TrainMetrics metrics;
  metrics.selection_counts.resize(net.space.depth());
  for (std::size_t l = 0; l < net.space.depth(); ++l)
    metrics.selection_counts[l].assign(net.space.layers[l].candidates.size(), 0);
  if (cfg.epochs == 0) return metrics;

  if (cfg.calibrate) calibrate_running_stats(net, data.batch(0, 0).images);

  std::vector<BNParams*> block_bns, layer_bns;
  for (auto& layer : net.blocks)
    for (auto& b : layer) block_bns.push_back(&b.indicator);
  for (auto& u : net.layer_indicators)
    if (u) layer_bns.push_back(&*u);

  Sgd sgd(cfg.sgd);
  const std::size_t per_epoch = data.batches_per_epoch();
  const std::size_t total = cfg.epochs * per_epoch;
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    const auto batches = data.epoch(e);
    for (const Batch& batch : batches) {
      const double lr = cfg.sgd.rate(metrics.rounds, total);
      const SampleRound round = fair_sample_round(net.space, cfg.seed, metrics.rounds, cfg.layer_indicators);
      GradientSet grads;
      for (const auto& path : round.block_paths) {
        const double loss = detail::path_loss_and_grads(net, batch, path, {BNMode::train, false}, grads);
        for (std::size_t l = 0; l < path.choices.size(); ++l)
          ++metrics.selection_counts[l][static_cast<std::size_t>(path.choices[l])];
        StepRecord rec{step++, to_string(path), loss, lr};
        if (on_step) on_step(rec);
        metrics.steps.push_back(std::move(rec));
      }
      sgd.apply(grads, block_bns, {}, lr);
      if (round.layer_path) {
        GradientSet lg;
        const double loss = detail::path_loss_and_grads(net, batch, *round.layer_path, {BNMode::train, true}, lg);
        sgd.apply(lg, layer_bns, {}, lr);
        ++metrics.layer_path_steps;
        StepRecord rec{step++, to_string(*round.layer_path), loss, lr};
        if (on_step) on_step(rec);
        metrics.steps.push_back(std::move(rec));
      }
      ++metrics.rounds;
    }
  }
  return metrics;
}

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Eval-mode accuracy and mean loss of one path over a dataset.
inline EvalResult evaluate_path(Supernet& net, const PathSample& path, const Dataset& data,
                                std::size_t batch_size = 128) {
  if (data.size() == 0) throw ConfigError("cannot evaluate on an empty dataset");
  std::size_t correct = 0;
  double loss_sum = 0.0;
  for (std::size_t begin = 0; begin < data.size(); begin += batch_size) {
    const std::size_t end = std::min(data.size(), begin + batch_size);
    Tape tape;
    const Node out = forward_path(tape, tape.input(data.images.slice_batch(begin, end)), net, path, {BNMode::eval, false});
    const LossResult r = softmax_cross_entropy(
        tape.value(out), std::span<const int>(data.labels).subspan(begin, end - begin));
    correct += r.correct;
    loss_sum += r.loss * static_cast<double>(end - begin);
  }
  return {static_cast<double>(correct) / static_cast<double>(data.size()),
          loss_sum / static_cast<double>(data.size())};
}

/// Single-path network cut from a supernet: one candidate per layer, no layer indicators.
inline Supernet extract_subnet(const Supernet& net, const PathSample& path) {
  validate_path(net.space, path, false);
  Supernet sub;
  sub.space = net.space;
  sub.padding = net.padding;
  sub.stem = net.stem;
  sub.stem_bn = net.stem_bn;
  sub.head = net.head;
  sub.blocks.resize(net.space.depth());
  sub.layer_indicators.resize(net.space.depth());
  for (std::size_t l = 0; l < net.space.depth(); ++l) {
    const auto c = static_cast<std::size_t>(path.choices[l]);
    sub.space.layers[l].candidates = {net.space.layers[l].candidates[c]};
    sub.blocks[l].push_back(net.blocks[l][c]);
  }
  return sub;
}

struct RetrainConfig {
  std::size_t epochs = 10;
  SgdConfig sgd{0.05, 0.9, 0.0, true};
  std::uint64_t seed = 0;
};

struct RetrainResult {
  Supernet subnet;  // single-candidate network, all weights trained
  double val_accuracy = 0.0;
  double train_loss = 0.0;  // mean loss over the final epoch
};

/// Unfreezes every weight of the chosen path and trains it with full backpropagation.
inline RetrainResult retrain_subnet(const Supernet& source, const PathSample& choice, const DatasetStream& train,
                                    const Dataset& val, const RetrainConfig& cfg) {
  RetrainResult result{extract_subnet(source, choice), 0.0, 0.0};
  Supernet& sub = result.subnet;
  const PathSample path{std::vector<int>(sub.space.depth(), 0)};

  std::vector<LayerParams*> layers{&sub.stem, &sub.head};
  std::vector<BNParams*> bns{&sub.stem_bn};
  for (auto& layer : sub.blocks)
    for (auto& b : layer) {
      for (auto& p : b.layers) layers.push_back(&p);
      bns.push_back(&b.indicator);
    }
  for (auto* p : layers) p->frozen = false;
  for (auto* bn : bns) bn->trainable = true;

  calibrate_running_stats(sub, train.batch(0, 0).images);
  Sgd sgd(cfg.sgd);
  const std::size_t total = cfg.epochs * train.batches_per_epoch();
  std::size_t step = 0;
  for (std::size_t e = 0; e < cfg.epochs; ++e) {
    double loss_sum = 0.0;
    std::size_t n = 0;
    for (const Batch& batch : train.epoch(e)) {
      const double lr = cfg.sgd.rate(step++, total);
      GradientSet grads;
      double loss = 0.0;
      try {
        Tape tape;
        const Node out = forward_path(tape, tape.input(batch.images), sub, path, {BNMode::train, false});
        const LossResult r = softmax_cross_entropy(tape.value(out), batch.labels);
        loss = r.loss;
        if (!std::isfinite(loss)) throw NumericError("non-finite loss");
        grads = tape.backward(out, r.grad, GradScope::all);
      } catch (const NumericError& err) {
        throw DivergenceError(std::string("retraining diverged (") + err.what() +
                                  "); reduce the learning rate below " + std::to_string(cfg.sgd.lr),
                              to_string(choice));
      }
      sgd.apply(grads, bns, layers, lr);
      loss_sum += loss;
      ++n;
    }
    result.train_loss = n ? loss_sum / static_cast<double>(n) : 0.0;
  }
  result.val_accuracy = evaluate_path(sub, path, val).accuracy;
  return result;
}

}  // namespace isonas
