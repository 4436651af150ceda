#include <gtest/gtest.h>

#include <map>

#include "isonas/isonas.hpp"

using namespace isonas;

namespace {

SearchSpace small_space(std::size_t depth, std::size_t m, std::vector<std::size_t> reductions = {},
                        std::size_t d = 8, std::size_t n = 12, std::size_t classes = 4) {
  SpaceConfig sc;
  sc.depth = depth;
  sc.candidates = m;
  sc.channels = d;
  sc.reduction_layers = std::move(reductions);
  return make_search_space(sc, 1, n, classes);
}

Supernet small_net(const SearchSpace& s, std::uint64_t seed = 1) {
  SupernetInit init;
  init.block.seed = seed;
  return build_supernet(s, init);
}

}  // namespace

TEST(SearchSpace, ValidationNamesTheOffendingSlot) {
  SearchSpace s = small_space(3, 2);
  s.layers[2].channels = 6;
  try {
    s.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("layer slot 2"), std::string::npos);
  }
  SearchSpace k = small_space(2, 2);
  k.layers[1].candidates[0].kernel = 13;
  EXPECT_THROW(k.validate(), ConfigError);
  SearchSpace st = small_space(2, 2);
  st.layers[0].candidates[0].stride = 2;
  EXPECT_THROW(st.validate(), ConfigError);
  EXPECT_EQ(small_space(4, 3).size(), 81u);
  EXPECT_EQ(parse_block_kind("shuffle-xception"), BlockKind::shuffle_xception);
}

TEST(Blocks, EveryTemplateIsCloseToIsometricUnderOrthogonalInitOnly) {
  std::vector<BlockTemplate> ts = default_candidates(10, 1);
  const auto t2 = default_candidates(10, 2);
  ts.insert(ts.end(), t2.begin(), t2.end());
  ts.push_back({BlockKind::plain_conv, 3, 1, 1, Activation::tanh});
  BlockIsometryConfig cfg;
  cfg.width = 8;
  cfg.spatial = 6;
  cfg.seed = 3;
  for (const auto& t : ts) {
    const auto o = analyze_block(t, InitScheme::orthogonal_triangular, cfg);
    EXPECT_TRUE(o.verdict.pass) << o.module << " phi " << o.stats.phi << " var " << o.stats.trace_var;
    const auto g = analyze_block(t, InitScheme::gaussian, cfg);
    EXPECT_FALSE(g.verdict.pass) << g.module << " phi " << g.stats.phi << " var " << g.stats.trace_var;
  }
}

TEST(Blocks, OutputShapesFollowTheStride) {
  for (const auto& t : default_candidates(10, 2)) {
    BlockInit bi;
    Block b = build_block(t, 8, bi, "b");
    Tape tape;
    const Node y = forward_block(tape, tape.input(Tensor4(Shape4{2, 8, 8, 8}, 0.5)), b, BNMode::train, Padding::zero);
    EXPECT_EQ(tape.value(y).shape(), (Shape4{2, 8, 4, 4})) << describe(t);
  }
  EXPECT_THROW(build_block(default_candidates(1, 1)[0], 7, BlockInit{}, "odd"), ConfigError);
}

TEST(Sampler, EveryRoundSelectsEachCandidateOncePerLayer) {
  const SearchSpace s = small_space(4, 3, {2});
  std::vector<std::map<int, int>> counts(4);
  const std::size_t rounds = 7;
  for (std::size_t r = 0; r < rounds; ++r) {
    const SampleRound round = fair_sample_round(s, 9, r);
    EXPECT_EQ(round.layer_path.has_value(), r % 2 == 1);
    if (round.layer_path) {
      EXPECT_EQ(round.layer_path->choices[0], kLayerId);
      EXPECT_NE(round.layer_path->choices[2], kLayerId);  // reduction layer
    }
    for (const auto& p : round.block_paths)
      for (std::size_t l = 0; l < 4; ++l) ++counts[l][p.choices[l]];
  }
  for (const auto& c : counts)
    for (int m = 0; m < 3; ++m) EXPECT_EQ(c.at(m), static_cast<int>(rounds));
  EXPECT_EQ(fair_sample_round(s, 9, 3).block_paths, fair_sample_round(s, 9, 3).block_paths);
}

TEST(Supernet, IndicatorTrainingIsFairAndLeavesFrozenWeightsUntouched) {
  const SearchSpace s = small_space(3, 3, {1});
  Supernet net = small_net(s);
  const auto before = frozen_weight_hash(net);
  const auto gamma_before = net.blocks[0][0].indicator.gamma;
  const Dataset data = make_blobs(64, 4, 1, 12, 0.5, 2);
  const DatasetStream stream(data, 16, 3);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.sgd.lr = 0.1;
  const TrainMetrics m = train_indicators(net, stream, cfg);
  EXPECT_EQ(frozen_weight_hash(net), before);
  EXPECT_NE(net.blocks[0][0].indicator.gamma, gamma_before);
  EXPECT_EQ(m.rounds, 8u);
  EXPECT_EQ(m.layer_path_steps, 4u);
  for (const auto& layer : m.selection_counts)
    for (std::size_t c : layer) EXPECT_EQ(c, m.rounds);
  EXPECT_FALSE(net.layer_indicators[1].has_value());
  EXPECT_NE(net.layer_indicators[0]->gamma, std::vector<double>(8, 1.0));
}

TEST(Supernet, CheckpointRoundTripRestoresEveryTensor) {
  const SearchSpace s = small_space(2, 2);
  Supernet a = small_net(s, 4);
  a.blocks[1][1].indicator.gamma[3] = 0.25;
  const TensorMap t = collect_tensors(a);
  const TensorMap back = decode_checkpoint(encode_checkpoint(t));
  EXPECT_EQ(back, t);
  Supernet b = small_net(s, 4);
  restore_tensors(b, back);
  EXPECT_EQ(b.blocks[1][1].indicator.gamma[3], 0.25);
  TensorMap missing = t;
  missing.erase(missing.begin());
  EXPECT_THROW(restore_tensors(b, missing), ConfigError);
  auto bytes = encode_checkpoint(t);
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(decode_checkpoint(bytes), ParseError);
  bytes[0] = 'X';
  EXPECT_THROW(decode_checkpoint(bytes), ParseError);
}

TEST(Supernet, ZeroEpochsLeaveIndicatorsAtTheirInitialValues) {
  const SearchSpace s = small_space(2, 2);
  Supernet net = small_net(s);
  const DatasetStream stream(make_blobs(32, 4, 1, 12, 0.5, 2), 16, 3);
  TrainConfig cfg;
  cfg.epochs = 0;
  const TrainMetrics m = train_indicators(net, stream, cfg);
  EXPECT_EQ(m.rounds, 0u);
  for (auto* bn : net.indicators()) EXPECT_EQ(bn->gamma, std::vector<double>(bn->channels(), 1.0));
}

TEST(Retrain, ZeroEpochsGivesChanceLevelAccuracy) {
  // Gratings with random phase: class information lives in orientation and frequency,
  // which an untrained readout of the pooled features cannot separate.
  const SearchSpace s = small_space(2, 2, {}, 8, 8, 4);
  const Supernet net = small_net(s, 5);
  const Dataset data = make_stripes(800, 4, 1, 8, 0.5, 6);
  const DatasetStream stream(data, 32, 1);
  RetrainConfig rc;
  rc.epochs = 0;
  const RetrainResult r = retrain_subnet(net, PathSample{{0, 1}}, stream, data, rc);
  EXPECT_NEAR(r.val_accuracy, 0.25, 0.05);
  for (const auto* p : r.subnet.weight_layers()) EXPECT_FALSE(p->frozen);
}

TEST(Retrain, SeparableBlobsReachHighAccuracy) {
  const SearchSpace s = small_space(2, 2, {}, 8, 8, 4);
  const Supernet net = small_net(s, 3);
  const auto [train, val] = split_dataset(make_blobs(384, 4, 1, 8, 0.5, 5), 256.0 / 384.0, 1);
  const DatasetStream stream(train, 32, 9);
  RetrainConfig rc;
  rc.epochs = 20;
  const RetrainResult r = retrain_subnet(net, PathSample{{0, 0}}, stream, val, rc);
  EXPECT_GT(r.val_accuracy, 0.9);
}

TEST(Retrain, DivergenceSuggestsALowerLearningRate) {
  const SearchSpace s = small_space(1, 1);
  const Supernet net = small_net(s, 2);
  const Dataset data = make_blobs(64, 4, 1, 8, 0.5, 6);
  const DatasetStream stream(data, 16, 1);
  RetrainConfig rc;
  rc.epochs = 30;
  rc.sgd.lr = 1e6;
  rc.sgd.cosine = false;
  try {
    retrain_subnet(net, PathSample{{0}}, stream, data, rc);
    FAIL();
  } catch (const DivergenceError& e) {
    EXPECT_NE(std::string(e.what()).find("learning rate"), std::string::npos);
  }
}

TEST(Dataset, StreamOrderIsReproducibleAndAugmentationKeepsShapes) {
  const Dataset data = make_stripes(50, 3, 2, 8, 0.1, 4);
  const DatasetStream a(data, 16, 7, Augment{true, 1, true});
  const DatasetStream b(data, 16, 7, Augment{true, 1, true});
  EXPECT_EQ(a.epoch_order(3), b.epoch_order(3));
  EXPECT_NE(a.epoch_order(3), a.epoch_order(4));
  EXPECT_EQ(a.batches_per_epoch(), 4u);  // 16+16+16+2
  EXPECT_EQ(a.batch(1, 2).images.data().size(), b.batch(1, 2).images.data().size());
  EXPECT_EQ(a.batch(1, 2).labels, b.batch(1, 2).labels);
  Dataset bad = data;
  bad.labels[0] = 7;
  EXPECT_THROW(DatasetStream(bad, 4, 1), ConfigError);
}

TEST(Dataset, IdxRoundTripAndTruncation) {
  const std::vector<unsigned char> pixels{0, 255, 128, 64, 1, 2, 3, 4};
  const auto img = encode_idx_images(2, 2, 2, pixels);
  const IdxImages parsed = parse_idx_images(img);
  EXPECT_EQ(parsed.count, 2u);
  for (std::size_t i = 0; i < pixels.size(); ++i) EXPECT_EQ(parsed.pixels[i], pixels[i]);
  auto cut = img;
  cut.resize(cut.size() - 1);
  try {
    parse_idx_images(cut);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.offset, 16u + 7u);
  }
  auto bad = img;
  bad[3] = 0x01;
  EXPECT_THROW(parse_idx_images(bad), ParseError);
  const auto labels = encode_idx_labels({1, 0});
  EXPECT_EQ(parse_idx_labels(labels), (std::vector<unsigned char>{1, 0}));
}
