#pragma once

#include <functional>
#include <string>
#include <vector>

#include "isonas/config.hpp"
#include "isonas/pipeline.hpp"
#include "isonas/stats.hpp"

namespace isonas {

struct SubnetOutcome {
  PathSample path;
  double score = 0.0;
  double val_accuracy = 0.0;
};

/// Score-versus-accuracy study over every subnet of a small space.
struct RankCorrelationReport {
  std::vector<SubnetOutcome> subnets;  // best score first
  double spearman = 0.0;
  double top_accuracy = 0.0;           // accuracy of the highest-scoring subnet
  std::vector<std::size_t> random_picks;  // indices into `subnets`
  double random_median = 0.0;
  std::uint64_t frozen_hash_before = 0, frozen_hash_after = 0;
};

/// Trains the supernet's indicators, scores and enumerates every subnet, retrains each
/// from its supernet weights and correlates score with validation accuracy.
/// `random_count` subnets drawn without replacement give the random baseline.
inline RankCorrelationReport rank_correlation_experiment(const ExperimentConfig& c, std::size_t random_count,
                                                         const LogSink& log = {}) {
  auto [train, val] = load_dataset(c.dataset, stage_seed(c, SeedStream::data));
  const auto& s = train.images.shape();
  const SearchSpace space = make_search_space(c.space, s.channels, s.height, train.num_classes);
  if (space.size() > 10000) throw ConfigError("rank correlation enumerates the space; keep it at most 10^4 subnets");
  if (random_count > space.size()) throw ConfigError("more random subnets requested than the space holds");

  Supernet net = build_supernet(space, detail::supernet_init(c));

  RankCorrelationReport rep;
  rep.frozen_hash_before = frozen_weight_hash(net);
  const DatasetStream stream = detail::make_stream(train, c.train.batch, stage_seed(c, SeedStream::stream), c.dataset);
  TrainConfig tc;
  tc.epochs = c.train.epochs;
  tc.sgd = c.train.sgd;
  tc.seed = stage_seed(c, SeedStream::train);
  tc.layer_indicators = c.train.layer_indicators;
  train_indicators(net, stream, tc);
  rep.frozen_hash_after = frozen_weight_hash(net);

  const ScoreTable table = compute_scores(net);
  Rng search_rng(stage_seed(c, SeedStream::search));
  const auto ranked = search_topk(table, space, {}, static_cast<std::size_t>(space.size()), SearchStrategy::exhaustive,
                                  search_rng);

  const DatasetStream retrain_stream =
      detail::make_stream(train, c.retrain.batch, stage_seed(c, SeedStream::retrain), c.dataset);
  RetrainConfig rc;
  rc.epochs = c.retrain.epochs;
  rc.sgd = c.retrain.sgd;
  rc.seed = stage_seed(c, SeedStream::retrain);
  std::vector<double> scores, accs;
  for (const auto& r : ranked) {
    const RetrainResult res = retrain_subnet(net, r.path, retrain_stream, val, rc);
    rep.subnets.push_back({r.path, r.score, res.val_accuracy});
    scores.push_back(r.score);
    accs.push_back(res.val_accuracy);
    if (log) log("subnet " + to_string(r.path) + " score " + std::to_string(r.score) + " accuracy " +
                 std::to_string(res.val_accuracy));
  }
  rep.spearman = spearman(scores, accs);
  rep.top_accuracy = accs.front();

  std::vector<std::size_t> order(ranked.size());
  std::iota(order.begin(), order.end(), 0);
  Rng pick_rng(stage_seed(c, SeedStream::baselines));
  pick_rng.shuffle(order.begin(), order.end());
  rep.random_picks.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(random_count));
  std::vector<double> picked;
  for (std::size_t i : rep.random_picks) picked.push_back(accs[i]);
  if (!picked.empty()) rep.random_median = median(picked);
  return rep;
}

}  // namespace isonas
