#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "isonas/concentration.hpp"
#include "isonas/dataset.hpp"
#include "isonas/errors.hpp"
#include "isonas/isometry.hpp"
#include "isonas/search.hpp"
#include "isonas/search_space.hpp"
#include "isonas/supernet.hpp"
#include "isonas/trainer.hpp"

namespace isonas {

using Json = nlohmann::ordered_json;

struct TemplateConfig {
  BlockKind kind = BlockKind::mbconv;
  std::size_t kernel = 3;
  std::size_t expansion = 3;
  Activation activation = Activation::tanh;
  friend bool operator==(const TemplateConfig&, const TemplateConfig&) = default;
};

/// Layer count, candidates per layer and channel width; `templates` overrides the
/// default candidate list (stride is set by the layer kind).
struct SpaceConfig {
  std::size_t depth = 4;
  std::size_t candidates = 3;
  std::size_t channels = 8;
  std::vector<std::size_t> reduction_layers;
  std::vector<TemplateConfig> templates;
  friend bool operator==(const SpaceConfig&, const SpaceConfig&) = default;
};

struct InitConfig {
  InitScheme scheme = InitScheme::orthogonal_triangular;
  double v_star = 0.025;
  double gaussian_weight_variance = 2.0;
  Padding padding = Padding::circular;
  double head_gain = 1.0;
  friend bool operator==(const InitConfig&, const InitConfig&) = default;
};

struct DatasetConfig {
  std::string source = "blobs";  // blobs | stripes | idx
  std::size_t train_count = 512;
  std::size_t val_count = 256;
  std::size_t classes = 4;
  std::size_t channels = 1;
  std::size_t size = 8;
  double noise = 1.0;
  std::string idx_images;
  std::string idx_labels;
  std::size_t limit = 0;  // idx: keep the first `limit` samples (0 keeps all)
  bool random_crop = false;
  std::size_t crop_padding = 1;
  bool horizontal_flip = false;
  friend bool operator==(const DatasetConfig&, const DatasetConfig&) = default;
};

struct TrainSection {
  std::size_t epochs = 2;
  std::size_t batch = 32;
  SgdConfig sgd{0.05, 0.9, 0.0, true};
  bool layer_indicators = true;
  friend bool operator==(const TrainSection& a, const TrainSection& b) {
    return a.epochs == b.epochs && a.batch == b.batch && a.layer_indicators == b.layer_indicators &&
           a.sgd.lr == b.sgd.lr && a.sgd.momentum == b.sgd.momentum && a.sgd.weight_decay == b.sgd.weight_decay &&
           a.sgd.cosine == b.sgd.cosine;
  }
};

struct SearchSection {
  SearchStrategy strategy = SearchStrategy::exhaustive;
  std::size_t top_k = 3;
  Constraint constraint;
  EvolutionConfig evolution;
  friend bool operator==(const SearchSection& a, const SearchSection& b) {
    return a.strategy == b.strategy && a.top_k == b.top_k && a.constraint.max_flops == b.constraint.max_flops &&
           a.constraint.max_params == b.constraint.max_params && a.evolution.population == b.evolution.population &&
           a.evolution.generations == b.evolution.generations &&
           a.evolution.mutation_rate == b.evolution.mutation_rate && a.evolution.elitism == b.evolution.elitism &&
           a.evolution.tournament == b.evolution.tournament;
  }
};

struct RetrainSection {
  std::size_t epochs = 10;
  std::size_t batch = 32;
  SgdConfig sgd{0.05, 0.9, 0.0, true};
  std::size_t random_baselines = 0;  // extra random subnets retrained for comparison
  friend bool operator==(const RetrainSection& a, const RetrainSection& b) {
    return a.epochs == b.epochs && a.batch == b.batch && a.random_baselines == b.random_baselines &&
           a.sgd.lr == b.sgd.lr && a.sgd.momentum == b.sgd.momentum && a.sgd.weight_decay == b.sgd.weight_decay &&
           a.sgd.cosine == b.sgd.cosine;
  }
};

inline const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"analyze-isometry", "train-supernet", "score", "search",
                                              "retrain",          "verify-theorem", "report"};
  return names;
}

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  std::vector<std::string> stages{"train-supernet", "score", "search", "retrain", "report"};
  SpaceConfig space;
  InitConfig init;
  DatasetConfig dataset;
  TrainSection train;
  SearchSection search;
  RetrainSection retrain;
  BlockIsometryConfig isometry;
  TheoremConfig theorem;

  friend bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) {
    const auto& t = a.theorem;
    const auto& u = b.theorem;
    const bool theorem_eq = t.n == u.n && t.r == u.r && t.d == u.d && t.filter_counts == u.filter_counts &&
                            t.v == u.v && t.gamma == u.gamma && t.eps_dev == u.eps_dev &&
                            t.eps_quantile == u.eps_quantile && t.calibration_trials == u.calibration_trials &&
                            t.trials == u.trials && t.expectation_samples == u.expectation_samples &&
                            t.bn_eps == u.bn_eps && t.lipschitz_L == u.lipschitz_L &&
                            t.orthogonalize == u.orthogonalize && t.same_input == u.same_input &&
                            t.eps_multipliers == u.eps_multipliers && t.gamma_grid == u.gamma_grid &&
                            t.seed == u.seed;
    return a.seed == b.seed && a.output_dir == b.output_dir && a.stages == b.stages && a.space == b.space &&
           a.init == b.init && a.dataset == b.dataset && a.train == b.train && a.search == b.search &&
           a.retrain == b.retrain && a.isometry == b.isometry && theorem_eq;
  }
};

namespace detail {

/// Reads keys from one JSON object and rejects any key that was never read.
class StrictObject {
 public:
  StrictObject(const Json& j, std::string where) : j_(j), where_(std::move(where)) {
    if (!j_.is_object()) throw ConfigError("'" + where_ + "' must be an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("bad value for '" + where_ + "." + key + "': " + e.what());
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string path(const char* key) const { return where_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.contains(it.key())) throw ConfigError("unknown key '" + where_ + "." + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string where_;
  std::set<std::string, std::less<>> seen_;
};

template <typename Enum, typename Parse>
void read_enum(StrictObject& o, const char* key, Enum& out, Parse parse) {
  if (const Json* j = o.child(key)) {
    if (!j->is_string()) throw ConfigError("'" + o.path(key) + "' must be a string");
    out = parse(j->get<std::string>());
  }
}

inline Padding parse_padding(std::string_view s) {
  if (s == "zero") return Padding::zero;
  if (s == "circular") return Padding::circular;
  throw ConfigError("unknown padding '" + std::string(s) + "'");
}

inline std::string to_string(Padding p) { return p == Padding::zero ? "zero" : "circular"; }

inline std::string to_string(SearchStrategy s) {
  return s == SearchStrategy::exhaustive ? "exhaustive" : "evolutionary";
}

inline void read_sgd(StrictObject& o, SgdConfig& sgd) {
  o.read("lr", sgd.lr);
  o.read("momentum", sgd.momentum);
  o.read("weight_decay", sgd.weight_decay);
  o.read("cosine", sgd.cosine);
}

inline Json sgd_json(const SgdConfig& s) {
  return {{"lr", s.lr}, {"momentum", s.momentum}, {"weight_decay", s.weight_decay}, {"cosine", s.cosine}};
}

}  // namespace detail

inline void validate(const ExperimentConfig& c) {
  if (c.stages.empty()) throw ConfigError("'stages' must list at least one stage");
  for (const auto& s : c.stages)
    if (std::find(stage_names().begin(), stage_names().end(), s) == stage_names().end())
      throw ConfigError("unknown stage '" + s + "'");
  if (c.space.depth == 0 || c.space.candidates == 0) throw ConfigError("space needs depth and candidates > 0");
  for (std::size_t r : c.space.reduction_layers)
    if (r >= c.space.depth) throw ConfigError("reduction layer " + std::to_string(r) + " is beyond the space depth");
  if (c.dataset.source != "blobs" && c.dataset.source != "stripes" && c.dataset.source != "idx") {
    throw ConfigError("dataset.source must be blobs, stripes or idx");
  }
  if (c.dataset.source == "idx" && (c.dataset.idx_images.empty() || c.dataset.idx_labels.empty())) {
    throw ConfigError("dataset.source idx needs idx_images and idx_labels");
  }
  if (c.dataset.source != "idx" && (c.dataset.train_count < 2 || c.dataset.val_count < 1 || c.dataset.classes < 2)) {
    throw ConfigError("synthetic dataset needs train_count >= 2, val_count >= 1 and classes >= 2");
  }
  if (c.train.batch < 2 || c.retrain.batch < 2) throw ConfigError("batch sizes must be at least 2");
  if (c.search.top_k == 0) throw ConfigError("search.top_k must be positive");
  if (!(c.init.v_star > 0.0)) throw ConfigError("init.v_star must be positive");
  c.theorem.validate();
}

inline ExperimentConfig config_from_json(const Json& j) {
  using detail::StrictObject;
  ExperimentConfig c;
  StrictObject root(j, "config");
  root.read("seed", c.seed);
  root.read("output_dir", c.output_dir);
  root.read("stages", c.stages);

  if (const Json* s = root.child("space")) {
    StrictObject o(*s, "space");
    o.read("depth", c.space.depth);
    o.read("candidates", c.space.candidates);
    o.read("channels", c.space.channels);
    o.read("reduction_layers", c.space.reduction_layers);
    if (const Json* ts = o.child("templates")) {
      if (!ts->is_array()) throw ConfigError("'space.templates' must be an array");
      for (std::size_t i = 0; i < ts->size(); ++i) {
        StrictObject t((*ts)[i], "space.templates[" + std::to_string(i) + "]");
        TemplateConfig tc;
        detail::read_enum(t, "kind", tc.kind, parse_block_kind);
        t.read("kernel", tc.kernel);
        t.read("expansion", tc.expansion);
        detail::read_enum(t, "activation", tc.activation, parse_activation);
        t.finish();
        c.space.templates.push_back(tc);
      }
    }
    o.finish();
  }
  if (const Json* s = root.child("init")) {
    StrictObject o(*s, "init");
    detail::read_enum(o, "scheme", c.init.scheme, parse_init_scheme);
    o.read("v_star", c.init.v_star);
    o.read("gaussian_weight_variance", c.init.gaussian_weight_variance);
    detail::read_enum(o, "padding", c.init.padding, detail::parse_padding);
    o.read("head_gain", c.init.head_gain);
    o.finish();
  }
  if (const Json* s = root.child("dataset")) {
    StrictObject o(*s, "dataset");
    auto& d = c.dataset;
    o.read("source", d.source);
    o.read("train_count", d.train_count);
    o.read("val_count", d.val_count);
    o.read("classes", d.classes);
    o.read("channels", d.channels);
    o.read("size", d.size);
    o.read("noise", d.noise);
    o.read("idx_images", d.idx_images);
    o.read("idx_labels", d.idx_labels);
    o.read("limit", d.limit);
    o.read("random_crop", d.random_crop);
    o.read("crop_padding", d.crop_padding);
    o.read("horizontal_flip", d.horizontal_flip);
    o.finish();
  }
  if (const Json* s = root.child("train")) {
    StrictObject o(*s, "train");
    o.read("epochs", c.train.epochs);
    o.read("batch", c.train.batch);
    detail::read_sgd(o, c.train.sgd);
    o.read("layer_indicators", c.train.layer_indicators);
    o.finish();
  }
  if (const Json* s = root.child("search")) {
    StrictObject o(*s, "search");
    detail::read_enum(o, "strategy", c.search.strategy, parse_search_strategy);
    o.read("top_k", c.search.top_k);
    std::optional<std::uint64_t> mf, mp;
    if (const Json* v = o.child("max_flops"); v && !v->is_null()) mf = v->get<std::uint64_t>();
    if (const Json* v = o.child("max_params"); v && !v->is_null()) mp = v->get<std::uint64_t>();
    c.search.constraint = {mf, mp};
    auto& e = c.search.evolution;
    o.read("population", e.population);
    o.read("generations", e.generations);
    o.read("mutation_rate", e.mutation_rate);
    o.read("elitism", e.elitism);
    o.read("tournament", e.tournament);
    o.finish();
  }
  if (const Json* s = root.child("retrain")) {
    StrictObject o(*s, "retrain");
    o.read("epochs", c.retrain.epochs);
    o.read("batch", c.retrain.batch);
    detail::read_sgd(o, c.retrain.sgd);
    o.read("random_baselines", c.retrain.random_baselines);
    o.finish();
  }
  if (const Json* s = root.child("isometry")) {
    StrictObject o(*s, "isometry");
    auto& m = c.isometry;
    o.read("width", m.width);
    o.read("spatial", m.spatial);
    o.read("calibration_batch", m.calibration_batch);
    o.read("probes", m.probes);
    o.read("v_star", m.v_star);
    o.read("gaussian_weight_variance", m.gaussian_weight_variance);
    detail::read_enum(o, "padding", m.padding, detail::parse_padding);
    o.read("tol_phi", m.tol_phi);
    o.read("tol_var", m.tol_var);
    o.finish();
  }
  if (const Json* s = root.child("theorem")) {
    StrictObject o(*s, "theorem");
    auto& t = c.theorem;
    o.read("n", t.n);
    o.read("r", t.r);
    o.read("d", t.d);
    o.read("filter_counts", t.filter_counts);
    o.read("v", t.v);
    o.read("gamma", t.gamma);
    o.read("eps_dev", t.eps_dev);
    o.read("eps_quantile", t.eps_quantile);
    o.read("calibration_trials", t.calibration_trials);
    o.read("trials", t.trials);
    o.read("expectation_samples", t.expectation_samples);
    o.read("bn_eps", t.bn_eps);
    o.read("lipschitz_L", t.lipschitz_L);
    o.read("orthogonalize", t.orthogonalize);
    o.read("same_input", t.same_input);
    o.read("eps_multipliers", t.eps_multipliers);
    o.read("gamma_grid", t.gamma_grid);
    o.finish();
  }
  root.finish();
  c.isometry.seed = derive_seed(c.seed, 11);
  c.theorem.seed = derive_seed(c.seed, 12);
  validate(c);
  return c;
}

/// Fully resolved config: every key with its effective value.
inline Json config_to_json(const ExperimentConfig& c) {
  Json templates = Json::array();
  for (const auto& t : c.space.templates)
    templates.push_back({{"kind", std::string(to_string(t.kind))},
                         {"kernel", t.kernel},
                         {"expansion", t.expansion},
                         {"activation", std::string(to_string(t.activation))}});
  Json j;
  j["seed"] = c.seed;
  j["output_dir"] = c.output_dir;
  j["stages"] = c.stages;
  j["space"] = {{"depth", c.space.depth},
                {"candidates", c.space.candidates},
                {"channels", c.space.channels},
                {"reduction_layers", c.space.reduction_layers},
                {"templates", templates}};
  j["init"] = {{"scheme", std::string(to_string(c.init.scheme))},
               {"v_star", c.init.v_star},
               {"gaussian_weight_variance", c.init.gaussian_weight_variance},
               {"padding", detail::to_string(c.init.padding)},
               {"head_gain", c.init.head_gain}};
  const auto& d = c.dataset;
  j["dataset"] = {{"source", d.source},         {"train_count", d.train_count},
                  {"val_count", d.val_count},   {"classes", d.classes},
                  {"channels", d.channels},     {"size", d.size},
                  {"noise", d.noise},           {"idx_images", d.idx_images},
                  {"idx_labels", d.idx_labels}, {"limit", d.limit},
                  {"random_crop", d.random_crop}, {"crop_padding", d.crop_padding},
                  {"horizontal_flip", d.horizontal_flip}};
  Json train = detail::sgd_json(c.train.sgd);
  train["epochs"] = c.train.epochs;
  train["batch"] = c.train.batch;
  train["layer_indicators"] = c.train.layer_indicators;
  j["train"] = train;
  const auto& e = c.search.evolution;
  j["search"] = {{"strategy", detail::to_string(c.search.strategy)},
                 {"top_k", c.search.top_k},
                 {"max_flops", c.search.constraint.max_flops ? Json(*c.search.constraint.max_flops) : Json(nullptr)},
                 {"max_params", c.search.constraint.max_params ? Json(*c.search.constraint.max_params) : Json(nullptr)},
                 {"population", e.population},
                 {"generations", e.generations},
                 {"mutation_rate", e.mutation_rate},
                 {"elitism", e.elitism},
                 {"tournament", e.tournament}};
  Json retrain = detail::sgd_json(c.retrain.sgd);
  retrain["epochs"] = c.retrain.epochs;
  retrain["batch"] = c.retrain.batch;
  retrain["random_baselines"] = c.retrain.random_baselines;
  j["retrain"] = retrain;
  const auto& m = c.isometry;
  j["isometry"] = {{"width", m.width},
                   {"spatial", m.spatial},
                   {"calibration_batch", m.calibration_batch},
                   {"probes", m.probes},
                   {"v_star", m.v_star},
                   {"gaussian_weight_variance", m.gaussian_weight_variance},
                   {"padding", detail::to_string(m.padding)},
                   {"tol_phi", m.tol_phi},
                   {"tol_var", m.tol_var}};
  const auto& t = c.theorem;
  j["theorem"] = {{"n", t.n},
                  {"r", t.r},
                  {"d", t.d},
                  {"filter_counts", t.filter_counts},
                  {"v", t.v},
                  {"gamma", t.gamma},
                  {"eps_dev", t.eps_dev},
                  {"eps_quantile", t.eps_quantile},
                  {"calibration_trials", t.calibration_trials},
                  {"trials", t.trials},
                  {"expectation_samples", t.expectation_samples},
                  {"bn_eps", t.bn_eps},
                  {"lipschitz_L", t.lipschitz_L},
                  {"orthogonalize", t.orthogonalize},
                  {"same_input", t.same_input},
                  {"eps_multipliers", t.eps_multipliers},
                  {"gamma_grid", t.gamma_grid}};
  return j;
}

inline ExperimentConfig parse_config(std::string_view text) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  return config_from_json(j);
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

/// Re-derives the per-stage seeds after the master seed changes.
inline void set_seed(ExperimentConfig& c, std::uint64_t seed) {
  c.seed = seed;
  c.isometry.seed = derive_seed(seed, 11);
  c.theorem.seed = derive_seed(seed, 12);
}

/// Search space described by the config on a dataset of the given geometry.
inline SearchSpace make_search_space(const SpaceConfig& s, std::size_t input_channels, std::size_t input_size,
                                     std::size_t num_classes, Activation activation = Activation::tanh) {
  SearchSpace space;
  space.input_channels = input_channels;
  space.input_size = input_size;
  space.num_classes = num_classes;
  for (std::size_t l = 0; l < s.depth; ++l) {
    LayerSlot slot;
    slot.is_reduction = std::find(s.reduction_layers.begin(), s.reduction_layers.end(), l) != s.reduction_layers.end();
    slot.channels = s.channels;
    const std::size_t stride = slot.is_reduction ? 2 : 1;
    if (s.templates.empty()) {
      slot.candidates = default_candidates(s.candidates, stride);
      for (auto& t : slot.candidates) t.activation = activation;
    } else {
      if (s.candidates > s.templates.size()) throw ConfigError("space.candidates exceeds the template list");
      for (std::size_t m = 0; m < s.candidates; ++m) {
        const auto& t = s.templates[m];
        slot.candidates.push_back({t.kind, t.kernel, t.expansion, stride, t.activation});
      }
    }
    space.layers.push_back(std::move(slot));
  }
  space.validate();
  return space;
}

/// Train and validation sets described by the dataset section.
inline std::pair<Dataset, Dataset> load_dataset(const DatasetConfig& d, std::uint64_t seed) {
  Dataset all;
  double train_fraction = 0.0;
  if (d.source == "idx") {
    all = load_idx(d.idx_images, d.idx_labels);
    if (d.limit > 0 && d.limit < all.size()) {
      std::vector<std::size_t> idx(d.limit);
      std::iota(idx.begin(), idx.end(), 0);
      all = all.subset(idx);
    }
    const std::size_t total = d.train_count + d.val_count;
    train_fraction = static_cast<double>(d.train_count) / static_cast<double>(total);
  } else {
    const std::size_t count = d.train_count + d.val_count;
    all = d.source == "blobs" ? make_blobs(count, d.classes, d.channels, d.size, d.noise, seed)
                              : make_stripes(count, d.classes, d.channels, d.size, d.noise, seed);
    train_fraction = static_cast<double>(d.train_count) / static_cast<double>(count);
  }
  return split_dataset(all, train_fraction, derive_seed(seed, 1));
}

}  // namespace isonas
