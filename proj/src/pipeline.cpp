#include "neas/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <climits>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "neas/checkpoint.hpp"
#include "neas/errors.hpp"

namespace neas {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Config parsing.

namespace {

// Reads one JSON object, remembering which keys were consumed so that
// leftovers can be reported as unknown.
class Section {
 public:
  Section(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  template <typename T>
  T get(const std::string& key, T fallback) {
    used_.insert(key);
    if (!j_.contains(key) || j_.at(key).is_null()) return fallback;
    return convert<T>(key);
  }

  template <typename T>
  T require(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) throw ConfigError("missing required key " + name(key));
    return convert<T>(key);
  }

  const nlohmann::json* child(const std::string& key) {
    used_.insert(key);
    return j_.contains(key) ? &j_.at(key) : nullptr;
  }

  std::string name(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (const auto& [key, value] : j_.items()) {
      if (!used_.count(key)) throw ConfigError("unknown key " + name(key));
    }
  }

 private:
  template <typename T>
  T convert(const std::string& key) const {
    const auto& v = j_.at(key);
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!v.is_boolean()) throw ConfigError(name(key) + ": expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError(name(key) + ": expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_integer() && !v.is_number_unsigned()) {
            throw ConfigError(name(key) + ": expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!v.is_number()) throw ConfigError(name(key) + ": expected a number");
      } else if constexpr (std::is_same_v<T, std::string>) {
        if (!v.is_string()) throw ConfigError(name(key) + ": expected a string");
      }
      return v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError(name(key) + ": " + e.what());
    }
  }

  const nlohmann::json& j_;
  std::string path_;
  std::set<std::string> used_;
};

std::vector<OperatorSpec> default_operators() {
  std::vector<OperatorSpec> ops;
  int id = 0;
  for (int k : {3, 5, 7}) {
    for (int e : {1, 2}) ops.push_back({id++, OpKind::conv, k, e});
  }
  ops.push_back({id, OpKind::skip, 1, 1});
  return ops;
}

LrSchedule schedule_from(const std::string& s, const std::string& key) {
  if (s == "linear") return LrSchedule::linear;
  if (s == "constant") return LrSchedule::constant;
  throw ConfigError(key + ": unknown schedule '" + s + "'");
}

std::string schedule_name(LrSchedule s) {
  return s == LrSchedule::linear ? "linear" : "constant";
}

TrainConfig parse_train(const nlohmann::json* j, const std::string& path, TrainConfig t) {
  if (!j) return t;
  Section s(*j, path);
  t.learning_rate = s.get("learning_rate", t.learning_rate);
  t.schedule = schedule_from(s.get<std::string>("schedule", schedule_name(t.schedule)),
                             s.name("schedule"));
  t.momentum = s.get("momentum", t.momentum);
  t.weight_decay = s.get("weight_decay", t.weight_decay);
  t.batch_size = s.get("batch_size", t.batch_size);
  t.epochs = s.get("epochs", t.epochs);
  s.finish();
  if (!(t.learning_rate > 0)) throw ConfigError(path + ".learning_rate must be > 0");
  if (t.batch_size < 2) throw ConfigError(path + ".batch_size must be >= 2");
  if (t.epochs < 0) throw ConfigError(path + ".epochs must be >= 0");
  if (!(t.momentum >= 0 && t.momentum < 1)) throw ConfigError(path + ".momentum outside [0, 1)");
  if (!(t.weight_decay >= 0)) throw ConfigError(path + ".weight_decay must be >= 0");
  return t;
}

ojson train_json(const TrainConfig& t) {
  ojson j;
  j["learning_rate"] = t.learning_rate;
  j["schedule"] = schedule_name(t.schedule);
  j["momentum"] = t.momentum;
  j["weight_decay"] = t.weight_decay;
  j["batch_size"] = t.batch_size;
  j["epochs"] = t.epochs;
  return j;
}

void check_k(Section& s, int k) {
  if (!s.has("k")) {
    s.get<int>("k", 0);
    return;
  }
  const int v = s.get<int>("k", 0);
  if (v != k) {
    throw ConfigError(s.name("k") + " = " + std::to_string(v) +
                      " disagrees with space.k = " + std::to_string(k));
  }
}

}  // namespace

PipelineConfig parse_config(const std::string& text) {
  nlohmann::json root;
  try {
    root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  Section top(root, "");
  PipelineConfig cfg;
  cfg.seed = top.get<std::uint64_t>("seed", 0);
  cfg.output_dir = top.get<std::string>("output_dir", cfg.output_dir);
  cfg.dump_kernels = top.get("dump_kernels", false);
  cfg.eval_batch_size = top.get("eval_batch_size", cfg.eval_batch_size);

  const nlohmann::json* space_j = top.child("space");
  if (!space_j) throw ConfigError("missing required key space");
  const nlohmann::json* data_j = top.child("data");
  if (!data_j) throw ConfigError("missing required key data");

  {
    Section d(*data_j, "data");
    auto& p = cfg.data;
    p.classes = d.get("classes", p.classes);
    p.channels = d.get("channels", p.channels);
    p.image_size = d.get("image_size", p.image_size);
    p.train_per_class = d.get("train_per_class", p.train_per_class);
    p.val_per_class = d.get("val_per_class", p.val_per_class);
    p.quality_size = d.get("quality_size", p.quality_size);
    p.probe_size = d.get("probe_size", p.probe_size);
    p.noise = d.get("noise", p.noise);
    p.seed = d.get<std::uint64_t>("seed", cfg.seed);
    p.external_images = d.get<std::string>("external_images", "");
    p.external_labels = d.get<std::string>("external_labels", "");
    d.finish();
    p.validate();
  }

  {
    Section s(*space_j, "space");
    auto& sp = cfg.space;
    sp.depth = s.require<int>("depth");
    sp.k = s.require<int>("k");
    sp.channels = s.require<std::vector<int>>("channels");
    sp.strides = s.get("strides", std::vector<int>{});
    if (const auto* r = s.child("split_range")) {
      if (!r->is_array() || r->size() != 2 || !(*r)[0].is_number_integer() ||
          !(*r)[1].is_number_integer()) {
        throw ConfigError("space.split_range: expected [s_min, s_max]");
      }
      sp.s_min = (*r)[0].get<int>();
      sp.s_max = (*r)[1].get<int>();
    } else {
      sp.s_min = 1;
      sp.s_max = sp.depth;
    }
    const std::string act = s.get<std::string>("activation", "relu");
    if (act == "relu") {
      sp.activation = Activation::relu;
    } else if (act == "swish") {
      sp.activation = Activation::swish;
    } else {
      throw ConfigError("space.activation: unknown activation '" + act + "'");
    }
    sp.stem.in_channels = cfg.data.channels;
    sp.stem.in_size = cfg.data.image_size;
    if (const auto* st = s.child("stem")) {
      Section stem(*st, "space.stem");
      sp.stem.out_channels = stem.get("channels", sp.stem.out_channels);
      sp.stem.stride = stem.get("stride", sp.stem.stride);
      sp.stem.kernel_size = stem.get("kernel_size", sp.stem.kernel_size);
      stem.finish();
    }
    if (const auto* ops = s.child("operators")) {
      if (!ops->is_array() || ops->empty()) {
        throw ConfigError("space.operators: expected a non-empty array");
      }
      for (std::size_t i = 0; i < ops->size(); ++i) {
        Section o((*ops)[i], "space.operators[" + std::to_string(i) + "]");
        OperatorSpec spec;
        spec.op_id = o.require<int>("id");
        const std::string kind = o.require<std::string>("kind");
        if (kind == "conv") {
          spec.kind = OpKind::conv;
          spec.kernel_size = o.require<int>("kernel_size");
          spec.expansion = o.require<int>("expansion");
        } else if (kind == "skip") {
          spec.kind = OpKind::skip;
          spec.kernel_size = 1;
          spec.expansion = 1;
        } else {
          throw ConfigError(o.name("kind") + ": unknown operator kind '" + kind + "'");
        }
        o.finish();
        sp.operators.push_back(spec);
      }
    } else {
      sp.operators = default_operators();
    }
    s.finish();
  }

  cfg.train = parse_train(top.child("train"), "train", cfg.train);

  if (const auto* j = top.child("diversity")) {
    Section s(*j, "diversity");
    check_k(s, cfg.space.k);
    auto& d = cfg.diversity;
    d.beta = s.get("beta", d.beta);
    d.gamma = s.get("gamma", d.gamma);
    d.samples = s.get("samples", d.samples);
    d.k_drop = s.get("k_drop", d.k_drop);
    d.threshold = s.get<std::size_t>("threshold", d.threshold);
    d.epochs_between = s.get("epochs_between", d.epochs_between);
    d.metric = shrink_metric_from_string(s.get<std::string>("metric", to_string(d.metric)));
    s.finish();
  }

  if (const auto* j = top.child("evolution")) {
    Section s(*j, "evolution");
    check_k(s, cfg.space.k);
    auto& e = cfg.evolution;
    e.population = s.get("population", e.population);
    e.generations = s.get("generations", e.generations);
    e.top_k = s.get("top_k", e.top_k);
    e.p_split = s.get("p_split", e.p_split);
    e.p_layer = s.get("p_layer", e.p_layer);
    e.crossover_count = s.get("crossover_count", e.crossover_count);
    e.mutation_count = s.get("mutation_count", e.mutation_count);
    e.constraint = s.get("constraint", e.constraint);
    e.retry_budget = s.get("retry_budget", e.retry_budget);
    s.finish();
  }
  cfg.evolution.seed = derive_seed(cfg.seed, "evolve");

  if (const auto* j = top.child("rank_study")) {
    Section s(*j, "rank_study");
    cfg.rank_study.archs = s.get("archs", cfg.rank_study.archs);
    cfg.rank_study.retrain.train =
        parse_train(s.child("train"), "rank_study.train", cfg.rank_study.retrain.train);
    s.finish();
    if (cfg.rank_study.archs < 2) throw ConfigError("rank_study.archs must be >= 2");
  }

  if (const auto* j = top.child("compare")) {
    Section s(*j, "compare");
    auto& c = cfg.compare;
    c.budget = s.get("budget", c.budget);
    c.fitness = s.get<std::string>("fitness", c.fitness);
    c.diversity_weight = s.get("diversity_weight", c.diversity_weight);
    c.cost_weight = s.get("cost_weight", c.cost_weight);
    s.finish();
    if (c.fitness != "surrogate" && c.fitness != "supernet") {
      throw ConfigError("compare.fitness: expected \"surrogate\" or \"supernet\"");
    }
  }
  top.finish();
  validate_config(cfg);
  return cfg;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string dump_config(const PipelineConfig& cfg) {
  ojson j;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["dump_kernels"] = cfg.dump_kernels;
  j["eval_batch_size"] = cfg.eval_batch_size;
  ojson sp;
  sp["depth"] = cfg.space.depth;
  sp["k"] = cfg.space.k;
  sp["split_range"] = {cfg.space.s_min, cfg.space.s_max};
  sp["channels"] = cfg.space.channels;
  std::vector<int> strides = cfg.space.strides;
  if (strides.empty()) strides.assign(static_cast<std::size_t>(cfg.space.depth), 1);
  sp["strides"] = strides;
  sp["activation"] = cfg.space.activation == Activation::relu ? "relu" : "swish";
  sp["stem"] = {{"channels", cfg.space.stem.out_channels},
                {"stride", cfg.space.stem.stride},
                {"kernel_size", cfg.space.stem.kernel_size}};
  auto ops = ojson::array();
  for (const auto& o : cfg.space.operators) {
    ojson e;
    e["id"] = o.op_id;
    e["kind"] = o.kind == OpKind::conv ? "conv" : "skip";
    if (o.kind == OpKind::conv) {
      e["kernel_size"] = o.kernel_size;
      e["expansion"] = o.expansion;
    }
    ops.push_back(std::move(e));
  }
  sp["operators"] = std::move(ops);
  j["space"] = std::move(sp);
  j["train"] = train_json(cfg.train);
  const auto& d = cfg.diversity;
  j["diversity"] = {{"beta", d.beta},
                    {"gamma", d.gamma},
                    {"samples", d.samples},
                    {"k_drop", d.k_drop},
                    {"threshold", d.threshold},
                    {"epochs_between", d.epochs_between},
                    {"metric", to_string(d.metric)}};
  const auto& e = cfg.evolution;
  ojson ev;
  ev["population"] = e.population;
  ev["generations"] = e.generations;
  ev["top_k"] = e.top_k;
  ev["p_split"] = e.p_split;
  ev["p_layer"] = e.p_layer;
  ev["crossover_count"] = e.crossover_count;
  ev["mutation_count"] = e.mutation_count;
  ev["constraint"] = std::isfinite(e.constraint) ? ojson(e.constraint) : ojson(nullptr);
  ev["retry_budget"] = e.retry_budget;
  j["evolution"] = std::move(ev);
  const auto& p = cfg.data;
  ojson data;
  data["classes"] = p.classes;
  data["channels"] = p.channels;
  data["image_size"] = p.image_size;
  data["train_per_class"] = p.train_per_class;
  data["val_per_class"] = p.val_per_class;
  data["quality_size"] = p.quality_size;
  data["probe_size"] = p.probe_size;
  data["noise"] = p.noise;
  data["seed"] = p.seed;
  data["external_images"] = p.external_images;
  data["external_labels"] = p.external_labels;
  j["data"] = std::move(data);
  j["rank_study"] = {{"archs", cfg.rank_study.archs},
                     {"train", train_json(cfg.rank_study.retrain.train)}};
  j["compare"] = {{"budget", cfg.compare.budget},
                  {"fitness", cfg.compare.fitness},
                  {"diversity_weight", cfg.compare.diversity_weight},
                  {"cost_weight", cfg.compare.cost_weight}};
  return j.dump(2);
}

std::uint64_t config_digest(const PipelineConfig& cfg) {
  return fnv1a(dump_config(cfg));
}

NetworkPlan PipelineConfig::plan() const {
  NetworkPlan plan;
  plan.stem = space.stem;
  plan.num_classes = data.classes;
  plan.activation = space.activation;
  int in_ch = space.stem.out_channels;
  int size = (space.stem.in_size + space.stem.stride - 1) / space.stem.stride;
  for (int m = 1; m <= space.depth; ++m) {
    LayerSpec l;
    l.index = m;
    l.in_channels = in_ch;
    l.out_channels = space.channels[static_cast<std::size_t>(m - 1)];
    l.stride = space.strides.empty() ? 1 : space.strides[static_cast<std::size_t>(m - 1)];
    l.in_size = size;
    for (const auto& op : space.operators) {
      if (op.kind == OpKind::skip && !l.allows_skip()) continue;
      l.candidates.push_back(op);
    }
    in_ch = l.out_channels;
    size = l.out_size();
    plan.layers.push_back(std::move(l));
  }
  return plan;
}

SearchSpaceState PipelineConfig::initial_space() const {
  return SearchSpaceState::full(plan().layers, space.k, space.s_min, space.s_max);
}

CostModel PipelineConfig::cost_model() const {
  CostModel cm = analytic_cost_model(space.stem, plan().layers, data.classes);
  cm.constraint = evolution.constraint;
  return cm;
}

void validate_config(const PipelineConfig& cfg) {
  const auto& sp = cfg.space;
  if (sp.depth < 2) throw ConfigError("space.depth must be >= 2");
  if (sp.k < 1) throw ConfigError("space.k must be >= 1");
  if (static_cast<int>(sp.channels.size()) != sp.depth) {
    throw ConfigError("space.channels must list one width per layer (" +
                      std::to_string(sp.depth) + ")");
  }
  for (int c : sp.channels) {
    if (c < 1) throw ConfigError("space.channels must be positive");
  }
  if (!sp.strides.empty()) {
    if (static_cast<int>(sp.strides.size()) != sp.depth) {
      throw ConfigError("space.strides must list one stride per layer");
    }
    for (int s : sp.strides) {
      if (s != 1 && s != 2) throw ConfigError("space.strides entries must be 1 or 2");
    }
  }
  if (sp.s_min < 1 || sp.s_min > sp.s_max || sp.s_max > sp.depth) {
    throw ConfigError("space.split_range must satisfy 1 <= s_min <= s_max <= depth");
  }
  if (sp.stem.out_channels < 1 || (sp.stem.stride != 1 && sp.stem.stride != 2) ||
      sp.stem.kernel_size < 1 || sp.stem.kernel_size % 2 == 0) {
    throw ConfigError("space.stem: channels >= 1, stride 1 or 2, odd kernel_size");
  }
  if (cfg.eval_batch_size < 1) throw ConfigError("eval_batch_size must be >= 1");
  SearchSpaceState space;
  try {
    space = cfg.initial_space();
  } catch (const InvariantError& e) {
    throw ConfigError(std::string("space: ") + e.what());
  }
  cfg.diversity.validate(space);
  cfg.evolution.validate();
  if (cfg.compare.budget < 1) throw ConfigError("compare.budget must be >= 1");
}

// ---------------------------------------------------------------------------
// Run-directory helpers.

namespace {

void write_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::trunc);
    if (!os) throw Error("cannot write " + tmp.string());
    os << text;
    if (!os) throw Error("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::string read_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw InputError("cannot read " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

ojson survivors_json(const SearchSpaceState& space) {
  ojson j = ojson::object();
  for (int m = 1; m <= space.depth(); ++m) {
    if (!space.has_combos(m)) continue;
    auto list = ojson::array();
    for (const auto& c : space.survivors(m)) list.push_back(c.ops());
    j[std::to_string(m)] = std::move(list);
  }
  return j;
}

void restore_survivors(SearchSpaceState& space, const nlohmann::json& j) {
  for (int m = 1; m <= space.depth(); ++m) {
    if (!space.has_combos(m)) continue;
    const auto key = std::to_string(m);
    if (!j.contains(key)) throw InputError("checkpoint state lacks survivors of layer " + key);
    std::vector<Combination> list;
    for (const auto& c : j.at(key)) list.push_back(Combination::canonical(c.get<std::vector<int>>()));
    space.restrict(m, std::move(list));
  }
}

ShrinkReport shrink_report_from_json(const nlohmann::json& j) {
  ShrinkReport r;
  r.round = j.at("round").get<int>();
  r.epoch = j.at("epoch").get<int>();
  r.survivor_total = j.at("survivor_total").get<std::size_t>();
  for (const auto& d : j.at("dropped")) {
    r.dropped.push_back({d.at("layer").get<int>(),
                         Combination::canonical(d.at("combo").get<std::vector<int>>()),
                         d.at("score").get<double>(), r.round});
  }
  r.performed = true;
  return r;
}

struct Interrupt {};

}  // namespace

Phase1Result run_phase1(const PipelineConfig& cfg, const ToyDataset& data,
                        const Phase1Options& opt, ShrinkMetric metric) {
  Phase1Result r{Supernet<double>(cfg.plan(), derive_seed(cfg.seed, "init")),
                 cfg.initial_space(), {}, 0, false};
  DiversityConfig dcfg = cfg.diversity;
  dcfg.metric = metric;
  const long per_epoch = steps_per_epoch(data.train.size(), cfg.train.batch_size);
  const long total_steps = per_epoch * cfg.train.epochs;

  ScheduleState start;
  const std::uint64_t digest = config_digest(cfg);
  const fs::path ckpt_dir = opt.checkpoint_dir;
  const fs::path state_path = ckpt_dir / "state.json";
  const fs::path weights_path = ckpt_dir / "supernet.bin";
  std::vector<std::string> kept_log;
  if (opt.resume && !opt.checkpoint_dir.empty() && fs::exists(state_path)) {
    const auto st = nlohmann::json::parse(read_file(state_path));
    if (st.at("config_digest").get<std::uint64_t>() != digest) {
      throw ConfigError("checkpoint in " + ckpt_dir.string() +
                        " was written with a different config");
    }
    const auto epoch = st.at("epoch").get<int>();
    const auto round = st.at("shrink_round").get<int>();
    SearchSpaceState space = r.space;
    restore_survivors(space, st.at("survivors"));
    if (space.digest() != st.at("space_digest").get<std::uint64_t>()) {
      throw InputError("checkpoint space digest mismatch");
    }
    r.space = std::move(space);
    load_supernet(r.net, weights_path.string());
    start = {epoch, round};
    if (!opt.shrink_log.empty() && fs::exists(opt.shrink_log)) {
      std::istringstream lines(read_file(opt.shrink_log));
      std::string line;
      while (std::getline(lines, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (j.at("round").get<int>() < round) {
          kept_log.push_back(line);
          r.rounds.push_back(shrink_report_from_json(j));
        }
      }
    }
  }
  if (!opt.shrink_log.empty()) {
    std::string text;
    for (const auto& l : kept_log) text += l + "\n";
    write_atomic(opt.shrink_log, text);
  }
  if (!opt.checkpoint_dir.empty()) fs::create_directories(ckpt_dir);
  if (!opt.kernel_dir.empty()) fs::create_directories(opt.kernel_dir);

  long step = static_cast<long>(start.next_epoch) * per_epoch;
  ScheduleHooks hooks;
  hooks.train_epoch = [&](int epoch) {
    train_epoch(r.net, data.train, cfg.train,
                derive_seed(cfg.seed, "train", static_cast<std::uint64_t>(epoch)), step,
                total_steps,
                [&](std::uint64_t s) { return sample_uniform(r.space, s); });
  };
  hooks.estimate = [&](int round, int) {
    EstimationData ed{&data.quality, &data.probe.images, opt.threads, cfg.eval_batch_size};
    DiversityKernel k = estimate_kernel(r.net, r.space, dcfg, ed,
                                        derive_seed(cfg.seed, "shrink",
                                                    static_cast<std::uint64_t>(round)));
    if (!opt.kernel_dir.empty()) {
      std::ofstream os(fs::path(opt.kernel_dir) /
                       ("kernel_round_" + std::to_string(round) + ".csv"));
      write_kernel_csv(os, k);
    }
    return k;
  };
  hooks.on_round = [&](const ShrinkReport& report) {
    r.rounds.push_back(report);
    if (!opt.shrink_log.empty()) {
      std::ofstream os(opt.shrink_log, std::ios::app);
      os << shrink_report_json(report) << '\n';
      if (!os) throw Error("cannot append to " + opt.shrink_log);
    }
  };
  hooks.after_epoch = [&](int epoch, int next_round) {
    if (!opt.checkpoint_dir.empty()) {
      save_supernet(r.net, weights_path.string());
      ojson st;
      st["epoch"] = epoch + 1;
      st["shrink_round"] = next_round;
      st["space_digest"] = r.space.digest();
      st["config_digest"] = digest;
      st["survivors"] = survivors_json(r.space);
      write_atomic(state_path, st.dump(2) + "\n");
    }
    if (opt.stop_after_epoch >= 0 && epoch >= opt.stop_after_epoch) throw Interrupt{};
  };
  try {
    const auto res = run_shrinking_schedule(r.space, dcfg, cfg.train.epochs, hooks, start);
    r.epochs_trained = start.next_epoch + res.epochs_trained;
  } catch (const Interrupt&) {
    r.interrupted = true;
  }
  return r;
}

// ---------------------------------------------------------------------------
// search

namespace {

struct Manifest {
  std::string status = "running";
  std::uint64_t digest = 0;
  double phase1_seconds = 0;
  double phase2_seconds = 0;
  std::vector<ShrinkReport> rounds;
  std::optional<Candidate> best;
  int best_generation = 0;
  std::string error;

  std::string json() const {
    ojson j;
    j["status"] = status;
    j["config_digest"] = digest;
    j["versions"] = {{"neas", kVersion},
                     {"record", kRecordVersion},
                     {"checkpoint", kCheckpointVersion}};
    j["timings"] = {{"phase1_seconds", phase1_seconds},
                    {"phase2_seconds", phase2_seconds}};
    auto rs = ojson::array();
    for (const auto& r : rounds) {
      rs.push_back({{"round", r.round},
                    {"epoch", r.epoch},
                    {"dropped", r.dropped.size()},
                    {"survivor_total", r.survivor_total}});
    }
    j["shrink_rounds"] = std::move(rs);
    if (best) {
      j["best"] = {{"architecture", ojson::parse(serialize_architecture(best->arch))},
                   {"fitness", best->fitness},
                   {"cost", best->cost},
                   {"generation", best_generation}};
    } else {
      j["best"] = nullptr;
    }
    if (!error.empty()) j["error"] = error;
    return j.dump(2) + "\n";
  }
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

FitnessFn supernet_fitness(std::vector<Supernet<double>>& copies, const ToyDataset& data,
                           int batch_size) {
  return [&copies, &data, batch_size](int worker, const EnsembleArchitecture& arch) {
    return evaluate(copies[static_cast<std::size_t>(worker)], arch, data.val,
                    &data.probe.images, batch_size);
  };
}

}  // namespace

SearchOutcome cmd_search(const PipelineConfig& cfg, int threads, bool resume,
                         int stop_after_epoch) {
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  write_atomic(out / "config.json", dump_config(cfg) + "\n");
  Manifest manifest;
  manifest.digest = config_digest(cfg);
  write_atomic(out / "manifest.json", manifest.json());
  SearchOutcome outcome;
  try {
    const ToyDataset data = generate_dataset(cfg.data);
    if (!fs::exists(out / "dataset.bin")) save_dataset(data, (out / "dataset.bin").string());

    const auto t1 = std::chrono::steady_clock::now();
    Phase1Options opt;
    opt.checkpoint_dir = (out / "checkpoint").string();
    opt.shrink_log = (out / "shrink_log.jsonl").string();
    if (cfg.dump_kernels) opt.kernel_dir = (out / "kernels").string();
    opt.resume = resume;
    opt.stop_after_epoch = stop_after_epoch;
    opt.threads = threads;
    Phase1Result p1 = run_phase1(cfg, data, opt, cfg.diversity.metric);
    manifest.phase1_seconds = seconds_since(t1);
    manifest.rounds = p1.rounds;
    if (p1.interrupted) {
      manifest.status = "interrupted";
      write_atomic(out / "manifest.json", manifest.json());
      outcome.interrupted = true;
      return outcome;
    }

    const auto t2 = std::chrono::steady_clock::now();
    p1.net.freeze();
    const CostModel cm = cfg.cost_model();
    const int workers = std::max(1, threads);
    std::vector<Supernet<double>> copies(static_cast<std::size_t>(workers), p1.net);
    const fs::path evo_log = out / "evolution_log.jsonl";
    std::ofstream log(evo_log, std::ios::trunc);
    const auto result = run_evolution(
        p1.space, cm, cfg.evolution, supernet_fitness(copies, data, cfg.eval_batch_size),
        workers, [&](const Candidate& c) { log << candidate_json(c) << '\n'; });
    log.close();
    manifest.phase2_seconds = seconds_since(t2);
    manifest.best = result.best;
    manifest.best_generation = result.best_generation;
    outcome.best = result.best;
    outcome.final_record = serialize_architecture(result.best.arch);
    write_atomic(out / "final_architecture.json", outcome.final_record + "\n");
    write_atomic(out / "result.json", result_manifest_json(result) + "\n");
    manifest.status = "complete";
    write_atomic(out / "manifest.json", manifest.json());
  } catch (const std::exception& e) {
    manifest.status = "failed";
    manifest.error = e.what();
    write_atomic(out / "manifest.json", manifest.json());
    throw;
  }
  return outcome;
}

// ---------------------------------------------------------------------------
// compare-search

std::vector<double> running_top_mean(const std::vector<double>& evals, std::size_t top) {
  std::vector<double> out;
  std::multiset<double> best;  // the `top` largest so far
  double sum = 0;
  for (std::size_t i = 0; i < evals.size(); ++i) {
    best.insert(evals[i]);
    sum += evals[i];
    if (best.size() > top) {
      sum -= *best.begin();
      best.erase(best.begin());
    }
    if (i + 1 >= top) out.push_back(sum / static_cast<double>(top));
  }
  return out;
}

CompareCurves compare_search(const SearchSpaceState& space, const CostModel& cm,
                             const EvolutionConfig& evo, const FitnessFn& fitness,
                             int budget, int threads) {
  if (budget < 50) throw InputError("compare-search budget must be >= 50");
  EvolutionConfig e = evo;
  e.max_evaluations = budget;
  e.generations = INT_MAX / 2;
  const EvolutionConfig r = random_search_config(e);
  CompareCurves c;
  const auto run = [&](const EvolutionConfig& ec) {
    const auto res = run_evolution(space, cm, ec, fitness, threads);
    if (static_cast<int>(res.evaluations.size()) < budget) {
      throw InputError("search space yields only " + std::to_string(res.evaluations.size()) +
                       " distinct feasible architectures; budget " +
                       std::to_string(budget) + " cannot be met");
    }
    return running_top_mean(res.evaluations);
  };
  c.evolution = run(e);
  c.random = run(r);
  return c;
}

namespace {

// Frozen supernet and shrunk space from a finished search in `dir`.
std::pair<Supernet<double>, SearchSpaceState> load_trained(const PipelineConfig& cfg) {
  const fs::path dir = fs::path(cfg.output_dir) / "checkpoint";
  if (!fs::exists(dir / "state.json")) {
    throw InputError("no supernet checkpoint under " + dir.string() + "; run search first");
  }
  const auto st = nlohmann::json::parse(read_file(dir / "state.json"));
  SearchSpaceState space = cfg.initial_space();
  restore_survivors(space, st.at("survivors"));
  Supernet<double> net(cfg.plan(), derive_seed(cfg.seed, "init"));
  load_supernet(net, (dir / "supernet.bin").string());
  net.freeze();
  return {std::move(net), std::move(space)};
}

double max_cost(const SearchSpaceState& space, const CostModel& cm) {
  double c = cm.stem + space.k() * cm.head;
  for (int m = 1; m <= space.depth(); ++m) {
    double best = 0;
    for (const auto& op : space.layer(m).candidates) best = std::max(best, cm.layer_cost(m, op.op_id));
    c += space.k() * best;
  }
  return c;
}

}  // namespace

void cmd_compare_search(const PipelineConfig& cfg, int threads) {
  if (cfg.compare.budget < 50) throw InputError("compare-search budget must be >= 50");
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  const CostModel cm = cfg.cost_model();
  CompareCurves curves;
  if (cfg.compare.fitness == "surrogate") {
    const SearchSpaceState space = cfg.initial_space();
    const SurrogateOracle oracle(space, derive_seed(cfg.seed, "surrogate"),
                                 cfg.compare.diversity_weight, cfg.compare.cost_weight,
                                 max_cost(space, cm), cm);
    curves = compare_search(space, cm, cfg.evolution,
                            [&](int, const EnsembleArchitecture& a) { return oracle(a); },
                            cfg.compare.budget, threads);
  } else {
    auto [net, space] = load_trained(cfg);
    const ToyDataset data = generate_dataset(cfg.data);
    const int workers = std::max(1, threads);
    std::vector<Supernet<double>> copies(static_cast<std::size_t>(workers), net);
    curves = compare_search(space, cm, cfg.evolution,
                            supernet_fitness(copies, data, cfg.eval_batch_size),
                            cfg.compare.budget, workers);
  }
  std::ostringstream os;
  os.precision(17);
  os << "strategy,evaluations,top50_mean\n";
  for (std::size_t i = 0; i < curves.evolution.size(); ++i) {
    os << "evolution," << i + 50 << ',' << curves.evolution[i] << '\n';
  }
  for (std::size_t i = 0; i < curves.random.size(); ++i) {
    os << "random," << i + 50 << ',' << curves.random[i] << '\n';
  }
  write_atomic(out / "compare_search.csv", os.str());
}

// ---------------------------------------------------------------------------
// rank-study

RankComparison run_rank_comparison(const PipelineConfig& cfg, const ToyDataset& data,
                                   int threads) {
  Phase1Options opt;
  opt.threads = threads;
  const ShrinkMetric metric = cfg.diversity.metric == ShrinkMetric::none
                                  ? ShrinkMetric::diversity
                                  : cfg.diversity.metric;
  Phase1Result shrunk = run_phase1(cfg, data, opt, metric);
  Phase1Result plain = run_phase1(cfg, data, opt, ShrinkMetric::none);
  std::vector<EnsembleArchitecture> archs;
  std::set<EnsembleArchitecture> seen;
  for (int i = 0; static_cast<int>(archs.size()) < cfg.rank_study.archs && i < 100000; ++i) {
    auto a = sample_uniform(shrunk.space,
                            derive_seed(cfg.seed, "rank_arch", static_cast<std::uint64_t>(i)));
    if (seen.insert(a).second) archs.push_back(std::move(a));
  }
  std::vector<std::string> errors;
  const auto scratch = scratch_fitness_all(cfg.plan(), archs, data, cfg.rank_study.retrain,
                                           derive_seed(cfg.seed, "scratch"), threads, &errors);
  RankComparison rc;
  rc.shrunk = rank_report(shrunk.net, archs, scratch, data, threads);
  rc.unshrunk = rank_report(plain.net, archs, scratch, data, threads);
  return rc;
}

void cmd_rank_study(const PipelineConfig& cfg, int threads) {
  const fs::path out = cfg.output_dir;
  fs::create_directories(out);
  const ToyDataset data = generate_dataset(cfg.data);
  const RankComparison rc = run_rank_comparison(cfg, data, threads);
  for (const auto& [name, rep] : {std::pair{"shrunk", &rc.shrunk},
                                  std::pair{"unshrunk", &rc.unshrunk}}) {
    std::ostringstream os;
    write_rank_csv(os, *rep);
    write_atomic(out / (std::string("rank_") + name + ".csv"), os.str());
  }
  ojson j;
  j["shrunk"] = ojson::parse(rank_summary_json(rc.shrunk));
  j["unshrunk"] = ojson::parse(rank_summary_json(rc.unshrunk));
  write_atomic(out / "rank_summary.json", j.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// report

std::string cmd_report(const std::string& run_dir) {
  const fs::path dir = run_dir;
  if (!fs::exists(dir / "manifest.json")) {
    throw InputError("no manifest.json in " + dir.string());
  }
  std::ostringstream summary;
  std::vector<std::string> problems;
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(read_file(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw InputError("manifest.json is corrupt: " + std::string(e.what()));
  }
  summary << "run: " << dir.string() << "\n";
  summary << "status: " << manifest.value("status", std::string("unknown")) << "\n";
  if (fs::exists(dir / "config.json")) {
    try {
      const PipelineConfig cfg = parse_config(read_file(dir / "config.json"));
      const bool ok = config_digest(cfg) == manifest.value("config_digest", std::uint64_t{0});
      summary << "config digest: " << (ok ? "matches manifest" : "MISMATCH (config edited after the run)")
              << "\n";
    } catch (const Error& e) {
      problems.push_back(std::string("config.json: ") + e.what());
    }
  } else {
    problems.push_back("config.json missing");
  }

  auto read_jsonl = [&](const fs::path& path, auto&& on_line) {
    if (!fs::exists(path)) return false;
    std::ifstream is(path);
    std::string line;
    int number = 0;
    while (std::getline(is, line)) {
      ++number;
      if (line.empty()) continue;
      try {
        on_line(nlohmann::json::parse(line));
      } catch (const std::exception& e) {
        problems.push_back(path.filename().string() + " line " + std::to_string(number) +
                           ": " + e.what());
      }
    }
    return true;
  };

  const fs::path rep = dir / "report";
  fs::create_directories(rep);

  std::ostringstream surv;
  surv << "round,epoch,survivor_total\n";
  std::vector<std::size_t> totals;
  const bool have_shrink = read_jsonl(dir / "shrink_log.jsonl", [&](const nlohmann::json& j) {
    const auto r = shrink_report_from_json(j);
    surv << r.round << ',' << r.epoch << ',' << r.survivor_total << '\n';
    totals.push_back(r.survivor_total);
  });
  write_atomic(rep / "survivors.csv", surv.str());
  if (!have_shrink || totals.empty()) {
    summary << "phase 1: no shrink rounds logged\n";
  } else {
    const bool monotone = std::is_sorted(totals.rbegin(), totals.rend());
    summary << "phase 1: " << totals.size() << " shrink rounds, survivors " << totals.front()
            << " -> " << totals.back() << (monotone ? "" : " (NOT non-increasing)") << "\n";
  }

  std::map<int, double> gen_best;
  const bool have_evo = read_jsonl(dir / "evolution_log.jsonl", [&](const nlohmann::json& j) {
    const int g = j.at("generation").get<int>();
    const double f = j.at("fitness").get<double>();
    parse_architecture(j.at("architecture").dump());
    auto it = gen_best.find(g);
    if (it == gen_best.end() || f > it->second) gen_best[g] = f;
  });
  std::ostringstream fit;
  fit.precision(17);
  fit << "generation,best_in_generation,best_so_far\n";
  double running = -std::numeric_limits<double>::infinity();
  for (const auto& [g, f] : gen_best) {
    running = std::max(running, f);
    fit << g << ',' << f << ',' << running << '\n';
  }
  write_atomic(rep / "fitness.csv", fit.str());
  if (!have_evo || gen_best.empty()) {
    summary << "phase 2: absent (no evolution log entries)\n";
  } else {
    summary << "phase 2: " << gen_best.size() << " generations, best fitness " << running
            << "\n";
  }
  if (manifest.contains("best") && !manifest["best"].is_null()) {
    summary << "best architecture: " << manifest["best"]["architecture"].dump() << "\n";
  }

  if (fs::exists(dir / "rank_summary.json")) {
    try {
      const auto rs = nlohmann::json::parse(read_file(dir / "rank_summary.json"));
      std::ostringstream rk;
      rk << "variant,tau,n\n";
      for (const auto& [name, v] : rs.items()) {
        rk << name << ',' << v.at("tau").get<double>() << ',' << v.at("n").get<int>() << '\n';
        summary << "rank study (" << name << "): tau " << v.at("tau").get<double>() << " over "
                << v.at("n").get<int>() << " architectures\n";
      }
      write_atomic(rep / "rank.csv", rk.str());
    } catch (const std::exception& e) {
      problems.push_back(std::string("rank_summary.json: ") + e.what());
    }
  }
  for (const auto& p : problems) summary << "warning: " << p << "\n";
  write_atomic(rep / "summary.txt", summary.str());
  return summary.str();
}

}  // namespace neas
