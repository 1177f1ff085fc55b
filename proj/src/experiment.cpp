#include "wmcap/experiment.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <thread>

#include "json.hpp"
#include "wmcap/errors.hpp"

namespace wmcap {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.12g", v);
  return buf;
}

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError(what);
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
  for (const auto& [k, v] : j.items()) {
    bool found = false;
    for (const char* a : allowed)
      if (k == a) { found = true; break; }
    require(found, "unknown config key '" + k + "' in " + where);
  }
}

json config_json(const ExperimentConfig& c) {
  json j;
  j["scheme"] = to_string(c.scheme);
  j["L_grid"] = c.length_grid;
  j["J"] = c.identity_bits;
  j["deltas"] = c.deltas;
  json attacks = json::array();
  for (auto a : c.attacks) attacks.push_back(to_string(a));
  j["attacks"] = attacks;
  j["adversary_fractions"] = c.adversary_fractions;
  j["seeds"] = c.seeds;
  j["L_max"] = c.length_max;
  j["round_cap"] = c.round_cap;
  j["data"] = {{"classes", c.data.classes},
               {"dim", c.data.dim},
               {"samples", c.data.samples},
               {"test_fraction", c.data.test_fraction},
               {"seed", c.data.seed}};
  j["train"] = {{"learning_rate", c.train.learning_rate},
                {"batch_size", c.train.batch_size},
                {"epochs", c.train.epochs}};
  j["embed"] = {{"epochs", c.embed_epochs}, {"lambda", c.embed_lambda}};
  j["attack_opts"] = {{"lambda", c.attack_lambda},
                      {"epochs_per_round", c.attack_epochs_per_round},
                      {"prune_step", c.prune_step}};
  j["mrov"] = {{"sigma", c.mrov.sigma},
               {"rounds", c.mrov.rounds},
               {"reg_samples", c.mrov.reg_samples},
               {"gen_samples", c.mrov.gen_samples},
               {"latent_dim", c.mrov.latent_dim},
               {"hidden_dim", c.mrov.hidden_dim},
               {"vae_epochs", c.mrov.vae_epochs},
               {"match_tolerance", c.mrov.match_tolerance},
               {"match_iters", c.mrov.match_iters},
               {"target_ber", c.mrov.target_ber}};
  if (c.mrov.generator_path) j["mrov"]["generator_path"] = *c.mrov.generator_path;
  if (c.synthetic)
    j["synthetic"] = {{"classes", c.synthetic->classes},
                      {"train_size", c.synthetic->train_size}};
  return j;
}

json provenance_json(const ExperimentConfig& cfg) {
  json j;
  j["config_hash"] = config_hash(cfg);
  j["seeds"] = cfg.seeds;
  return j;
}

std::vector<std::string> provenance_lines(const ExperimentConfig& cfg) {
  std::string seeds = "seeds=";
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
    seeds += (i ? "," : "") + std::to_string(cfg.seeds[i]);
  return {"config=" + config_hash(cfg), seeds};
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
}

void write_json(const fs::path& path, const json& j) {
  write_text(path, j.dump(2) + "\n");
}

// Runs tasks on a small pool; results land in caller-owned slots, and the
// first exception (by task index) is rethrown after the pool drains.
void run_jobs(int jobs, std::vector<std::function<void()>>& tasks) {
  if (jobs < 1) jobs = 1;
  if (jobs == 1 || tasks.size() <= 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mutex;
  std::size_t err_index = tasks.size();
  std::exception_ptr err;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= tasks.size()) return;
      try {
        tasks[i]();
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mutex);
        if (i < err_index) {
          err_index = i;
          err = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  const int n = std::min<int>(jobs, static_cast<int>(tasks.size()));
  pool.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) pool.emplace_back(worker);
  for (auto& t : pool) t.join();
  if (err) std::rethrow_exception(err);
}

std::string frac_tag(double fraction) {
  return "frac" + std::to_string(static_cast<int>(std::lround(fraction * 100)));
}

std::string cell_tag(const ExperimentConfig& cfg, int length, std::uint64_t seed) {
  return to_string(cfg.scheme) + "_L" + std::to_string(length) + "_seed" +
         std::to_string(seed);
}

TrainConfig embed_config(const ExperimentConfig& cfg, const SeedPlan& plan) {
  TrainConfig ec = cfg.train;
  ec.epochs = cfg.embed_epochs;
  ec.lambda = cfg.embed_lambda;
  ec.seed = Rng(plan.train).split(99).base_seed();
  return ec;
}

}  // namespace

SeedPlan derive_seeds(std::uint64_t cell_seed) {
  Rng rng(cell_seed);
  SeedPlan plan;
  plan.model_init = rng.split(10).base_seed();
  plan.key = rng.split(11).base_seed();
  plan.train = rng.split(12).base_seed();
  plan.message = rng.split(13).base_seed();
  plan.attack = rng.split(14).base_seed();
  plan.mrov = rng.split(15).base_seed();
  return plan;
}

ExperimentConfig load_experiment_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path.string());
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  require(j.is_object(), "config root must be a JSON object");
  check_keys(j, "config",
             {"scheme", "L_grid", "J", "deltas", "attacks", "adversary_fractions",
              "seeds", "L_max", "round_cap", "out_dir", "data", "train", "embed",
              "attack_opts", "mrov", "synthetic"});

  ExperimentConfig c;
  try {
    if (j.contains("scheme")) c.scheme = scheme_from_string(j["scheme"].get<std::string>());
    if (j.contains("L_grid")) {
      c.length_grid = j["L_grid"].get<std::vector<int>>();
      require(!c.length_grid.empty(), "L_grid must be nonempty");
    } else {
      c.length_grid = {64};
    }
    if (j.contains("J")) c.identity_bits = j["J"].get<int>();
    if (j.contains("deltas")) {
      c.deltas = j["deltas"].get<std::vector<double>>();
      require(!c.deltas.empty(), "deltas must be nonempty");
    } else {
      c.deltas = {0.01, 0.02, 0.03};
    }
    if (j.contains("attacks")) {
      c.attacks.clear();
      for (const auto& a : j["attacks"])
        c.attacks.push_back(attack_kind_from_string(a.get<std::string>()));
      require(!c.attacks.empty(), "attacks must be nonempty");
    } else {
      c.attacks = {AttackKind::AdvOverwrite};
    }
    if (j.contains("adversary_fractions")) {
      c.adversary_fractions = j["adversary_fractions"].get<std::vector<double>>();
      require(!c.adversary_fractions.empty(), "adversary_fractions must be nonempty");
    } else {
      c.adversary_fractions = {0.1};
    }
    if (j.contains("seeds")) {
      c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
      require(!c.seeds.empty(), "seeds must be nonempty");
    } else {
      c.seeds = {0};
    }
    if (j.contains("L_max")) c.length_max = j["L_max"].get<double>();
    if (j.contains("round_cap")) c.round_cap = j["round_cap"].get<int>();
    if (j.contains("out_dir")) c.out_dir = j["out_dir"].get<std::string>();
    if (j.contains("data")) {
      const auto& d = j["data"];
      check_keys(d, "data", {"classes", "dim", "samples", "test_fraction", "seed"});
      if (d.contains("classes")) c.data.classes = d["classes"].get<int>();
      if (d.contains("dim")) c.data.dim = d["dim"].get<int>();
      if (d.contains("samples")) c.data.samples = d["samples"].get<int>();
      if (d.contains("test_fraction"))
        c.data.test_fraction = d["test_fraction"].get<double>();
      if (d.contains("seed")) c.data.seed = d["seed"].get<std::uint64_t>();
    }
    if (j.contains("train")) {
      const auto& t = j["train"];
      check_keys(t, "train", {"learning_rate", "batch_size", "epochs"});
      if (t.contains("learning_rate"))
        c.train.learning_rate = t["learning_rate"].get<double>();
      if (t.contains("batch_size")) c.train.batch_size = t["batch_size"].get<int>();
      if (t.contains("epochs")) c.train.epochs = t["epochs"].get<int>();
    }
    if (j.contains("embed")) {
      const auto& e = j["embed"];
      check_keys(e, "embed", {"epochs", "lambda"});
      if (e.contains("epochs")) c.embed_epochs = e["epochs"].get<int>();
      if (e.contains("lambda")) c.embed_lambda = e["lambda"].get<double>();
    }
    if (j.contains("attack_opts")) {
      const auto& a = j["attack_opts"];
      check_keys(a, "attack_opts", {"lambda", "epochs_per_round", "prune_step"});
      if (a.contains("lambda")) c.attack_lambda = a["lambda"].get<double>();
      if (a.contains("epochs_per_round"))
        c.attack_epochs_per_round = a["epochs_per_round"].get<int>();
      if (a.contains("prune_step")) c.prune_step = a["prune_step"].get<double>();
    }
    if (j.contains("mrov")) {
      const auto& m = j["mrov"];
      check_keys(m, "mrov",
                 {"sigma", "rounds", "reg_samples", "gen_samples", "latent_dim",
                  "hidden_dim", "vae_epochs", "match_tolerance", "match_iters",
                  "target_ber", "generator_path"});
      if (m.contains("sigma")) c.mrov.sigma = m["sigma"].get<double>();
      if (m.contains("rounds")) c.mrov.rounds = m["rounds"].get<int>();
      if (m.contains("reg_samples")) c.mrov.reg_samples = m["reg_samples"].get<int>();
      if (m.contains("gen_samples")) c.mrov.gen_samples = m["gen_samples"].get<int>();
      if (m.contains("latent_dim")) c.mrov.latent_dim = m["latent_dim"].get<int>();
      if (m.contains("hidden_dim")) c.mrov.hidden_dim = m["hidden_dim"].get<int>();
      if (m.contains("vae_epochs")) c.mrov.vae_epochs = m["vae_epochs"].get<int>();
      if (m.contains("match_tolerance"))
        c.mrov.match_tolerance = m["match_tolerance"].get<double>();
      if (m.contains("match_iters")) c.mrov.match_iters = m["match_iters"].get<int>();
      if (m.contains("target_ber")) c.mrov.target_ber = m["target_ber"].get<double>();
      if (m.contains("generator_path"))
        c.mrov.generator_path = m["generator_path"].get<std::string>();
    }
    if (j.contains("synthetic") && !j["synthetic"].is_null()) {
      const auto& s = j["synthetic"];
      check_keys(s, "synthetic", {"classes", "train_size"});
      ClassifierSpec spec;
      spec.classes = s.at("classes").get<int>();
      spec.train_size = s.at("train_size").get<double>();
      spec.identity_bits = c.identity_bits;
      spec.max_degradation = 0.5;  // placeholder; deltas supply the real value
      c.synthetic = spec;
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("bad config value: " + std::string(e.what()));
  }

  // cross-field validation
  require(!c.length_grid.empty(), "L_grid must be nonempty");
  for (std::size_t i = 0; i < c.length_grid.size(); ++i) {
    require(c.length_grid[i] >= 1, "L_grid entries must be >= 1");
    require(i == 0 || c.length_grid[i] > c.length_grid[i - 1],
            "L_grid must be strictly increasing");
  }
  require(c.identity_bits >= 1, "J must be >= 1");
  for (double d : c.deltas) require(d >= 0 && d < 1, "deltas must be in [0,1)");
  for (double f : c.adversary_fractions)
    require(f > 0 && f <= 1, "adversary fractions must be in (0,1]");
  {
    auto sorted = c.seeds;
    std::sort(sorted.begin(), sorted.end());
    require(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end(),
            "seeds must be distinct");
  }
  require(c.data.classes >= 2 && c.data.dim >= 2 && c.data.samples >= c.data.classes,
          "bad data block");
  require(c.data.test_fraction > 0 && c.data.test_fraction < 1,
          "test_fraction must be in (0,1)");
  require(c.train.learning_rate > 0 && c.train.batch_size >= 1 && c.train.epochs >= 1,
          "bad train block");
  require(c.embed_epochs >= 1 && c.embed_lambda >= 0, "bad embed block");
  require(c.round_cap >= 0, "round_cap must be >= 0");
  require(c.length_max >= c.length_grid.back(), "L_max must cover the L grid");
  require(c.mrov.sigma > 0 && c.mrov.rounds >= 1 && c.mrov.reg_samples >= 1 &&
              c.mrov.gen_samples >= 1,
          "bad mrov block");

  if (const char* env = std::getenv("WMCAP_OUT"); env && *env) c.out_dir = env;
  return c;
}

std::string config_hash(const ExperimentConfig& cfg) {
  const std::string dump = config_json(cfg).dump();
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char ch : dump) {
    h ^= ch;
    h *= 0x100000001b3ULL;
  }
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

EmbeddedCell build_embedded_cell(const ExperimentConfig& cfg, std::uint64_t seed,
                                 int length) {
  EmbeddedCell cell;
  cell.seed = seed;
  cell.length = length;
  cell.full = synth_dataset(cfg.data.classes, cfg.data.dim, cfg.data.samples,
                            cfg.data.seed);
  cell.splits = make_splits(cell.full, cfg.data.test_fraction,
                            cfg.adversary_fractions.front(), cfg.data.seed);

  const SeedPlan plan = derive_seeds(seed);
  Model init = make_mlp(cfg.data.dim, {64, 32}, cfg.data.classes, plan.model_init);
  TrainConfig tc = cfg.train;
  tc.seed = plan.train;
  cell.clean = train(init, cell.splits.train, tc).model;

  if (cfg.scheme == SchemeKind::WhiteBox)
    cell.key = keygen_white_box(length, cell.clean, plan.key);
  else
    cell.key = keygen_black_box(length, cfg.data.classes, cfg.data.dim, plan.key);
  cell.message = random_message(static_cast<std::size_t>(length), plan.message);
  cell.embedded = embed(cell.clean, cell.key, cell.message, cell.splits.train,
                        cell.splits.test, embed_config(cfg, plan));
  return cell;
}

AttackRunner make_attack_runner(const ExperimentConfig& cfg,
                                const EmbeddedCell& cell, AttackKind kind,
                                double adversary_fraction) {
  const DataSplits adv = make_splits(cell.full, cfg.data.test_fraction,
                                     adversary_fraction, cfg.data.seed);
  const SeedPlan plan = derive_seeds(cell.seed);
  AttackConfig acfg;
  acfg.kind = kind;
  acfg.adversary_fraction = adversary_fraction;
  acfg.lambda = cfg.attack_lambda;
  acfg.epochs_per_round = cfg.attack_epochs_per_round;
  acfg.prune_step = cfg.prune_step;
  acfg.seed = plan.attack;
  TrainConfig tc = cfg.train;
  tc.seed = plan.attack;
  return AttackRunner(std::move(acfg), adv.adversary, tc, &cell.key,
                      &cell.message);
}

namespace {

// cells keyed (seed, L); built once, then shared read-only by attack cells
std::map<std::pair<std::uint64_t, int>, EmbeddedCell> build_cells(
    const ExperimentConfig& cfg, const std::vector<int>& lengths, int jobs) {
  std::map<std::pair<std::uint64_t, int>, EmbeddedCell> cells;
  std::vector<std::pair<std::uint64_t, int>> keys;
  for (auto seed : cfg.seeds)
    for (int length : lengths) keys.emplace_back(seed, length);
  for (const auto& k : keys) cells[k];  // placeholders; pool fills them in
  std::vector<std::function<void()>> tasks;
  tasks.reserve(keys.size());
  for (const auto& k : keys)
    tasks.push_back([&cfg, &cells, k]() {
      cells[k] = build_embedded_cell(cfg, k.first, k.second);
    });
  run_jobs(jobs, tasks);
  return cells;
}

json embed_record(const ExperimentConfig& cfg, const EmbeddedCell& cell) {
  json j = provenance_json(cfg);
  j["seed"] = cell.seed;
  j["L"] = cell.length;
  j["scheme"] = to_string(cfg.scheme);
  j["fidelity"] = cell.embedded.fidelity;
  j["final_ber"] = cell.embedded.final_ber;
  j["clean_accuracy"] = accuracy(cell.clean, cell.splits.test);
  j["wm_accuracy"] = accuracy(cell.embedded.model, cell.splits.test);
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(param_hash(cell.embedded.model)));
  j["param_hash"] = buf;
  return j;
}

}  // namespace

int cmd_embed(const ExperimentConfig& cfg, int jobs) {
  const fs::path dir = fs::path(cfg.out_dir) / "embed";
  auto cells = build_cells(cfg, cfg.length_grid, jobs);
  for (const auto& [k, cell] : cells) {
    const std::string tag = cell_tag(cfg, cell.length, cell.seed);
    fs::create_directories(dir);
    save_model_json(cell.embedded.model, dir / (tag + ".model.json"));
    save_key_json(cell.key, dir / (tag + ".key.json"));
    write_text(dir / (tag + ".msg.hex"), to_hex(cell.message) + "\n");
    write_json(dir / (tag + ".fidelity.json"), embed_record(cfg, cell));
  }
  return 0;
}

namespace {

struct AttackCell {
  std::uint64_t seed;
  int length;
  AttackKind attack;
  double fraction;
  CapacityCurve curve;
  Model attacked;
};

std::vector<AttackCell> run_attack_grid(
    const ExperimentConfig& cfg,
    const std::map<std::pair<std::uint64_t, int>, EmbeddedCell>& cells, int jobs,
    bool keep_models) {
  std::vector<AttackCell> out;
  for (auto seed : cfg.seeds)
    for (int length : cfg.length_grid)
      for (auto attack : cfg.attacks)
        for (double fraction : cfg.adversary_fractions)
          out.push_back(AttackCell{seed, length, attack, fraction, {}, {}});

  std::vector<std::function<void()>> tasks;
  tasks.reserve(out.size());
  for (auto& cell : out)
    tasks.push_back([&cfg, &cells, &cell, keep_models]() {
      const auto& base = cells.at({cell.seed, cell.length});
      AttackRunner runner = make_attack_runner(cfg, base, cell.attack, cell.fraction);
      EstimateOptions opts;
      opts.round_cap = cfg.round_cap;
      cell.curve = estimate_capacity(base.embedded.model, base.key, base.message,
                                     runner, base.splits.test, opts);
      cell.curve.seeds = {cell.seed};
      if (keep_models) {
        // replay to recover the final model; estimate_capacity only keeps the curve
        AttackRunner replay = make_attack_runner(cfg, base, cell.attack, cell.fraction);
        Model m = base.embedded.model;
        for (std::size_t r = 1; r < cell.curve.records.size(); ++r) m = replay.step(m);
        cell.attacked = m;
      }
    });
  run_jobs(jobs, tasks);
  return out;
}

std::string attack_tag(const ExperimentConfig& cfg, const AttackCell& c) {
  return to_string(cfg.scheme) + "_" + to_string(c.attack) + "_L" +
         std::to_string(c.length) + "_" + frac_tag(c.fraction) + "_seed" +
         std::to_string(c.seed);
}

}  // namespace

int cmd_attack(const ExperimentConfig& cfg, int jobs) {
  require(!cfg.attacks.empty(), "attack: attack list must be nonempty");
  const fs::path dir = fs::path(cfg.out_dir) / "attack";
  auto cells = build_cells(cfg, cfg.length_grid, jobs);
  auto results = run_attack_grid(cfg, cells, jobs, true);
  for (const auto& r : results) {
    const std::string tag = attack_tag(cfg, r);
    fs::create_directories(dir);
    save_curve_csv(r.curve, dir / (tag + ".csv"), provenance_lines(cfg));
    save_model_json(r.attacked, dir / (tag + ".model.json"));
  }
  return 0;
}

int cmd_estimate(const ExperimentConfig& cfg, int jobs) {
  require(!cfg.attacks.empty(), "estimate: attack list must be nonempty");
  const fs::path dir = fs::path(cfg.out_dir) / "estimate";
  auto cells = build_cells(cfg, cfg.length_grid, jobs);
  auto results = run_attack_grid(cfg, cells, jobs, false);

  fs::create_directories(dir);
  for (const auto& r : results) {
    const std::string tag = attack_tag(cfg, r);
    save_curve_csv(r.curve, dir / (tag + ".csv"), provenance_lines(cfg));
  }

  // aggregate each (L, attack, fraction) over seeds
  for (int length : cfg.length_grid)
    for (auto attack : cfg.attacks)
      for (double fraction : cfg.adversary_fractions) {
        std::vector<CapacityCurve> group;
        for (const auto& r : results)
          if (r.length == length && r.attack == attack && r.fraction == fraction)
            group.push_back(r.curve);
        const AggregatedCurve agg = aggregate_curves(group);
        json j = provenance_json(cfg);
        j["L"] = agg.length;
        j["attack"] = to_string(agg.attack);
        j["scheme"] = to_string(cfg.scheme);
        j["adversary_fraction"] = fraction;
        j["mean_curve"] = {{"delta", agg.delta_grid}, {"c_hat", agg.mean_c_hat}};
        j["band"] = {{"lo", agg.lo_c_hat}, {"hi", agg.hi_c_hat}};
        write_json(dir / ("aggregate_" + to_string(cfg.scheme) + "_" +
                          to_string(attack) + "_L" + std::to_string(length) + "_" +
                          frac_tag(fraction) + ".json"),
                   j);
      }
  return 0;
}

int cmd_minlength(const ExperimentConfig& cfg, int jobs) {
  require(!cfg.deltas.empty(), "minlength: delta list must be nonempty");
  const fs::path dir = fs::path(cfg.out_dir) / "minlength";
  fs::create_directories(dir);

  json table = provenance_json(cfg);
  table["J"] = cfg.identity_bits;
  json rows = json::array();
  bool any_infeasible = false;

  if (cfg.synthetic) {
    table["mode"] = "synthetic";
    for (double delta : cfg.deltas) {
      ClassifierSpec spec = *cfg.synthetic;
      spec.identity_bits = cfg.identity_bits;
      spec.max_degradation = delta;
      json row;
      row["delta"] = delta;
      try {
        const double length =
            delta == 0.0 ? static_cast<double>(cfg.identity_bits)
                         : closed_form_min_length(spec);
        if (length > cfg.length_max) throw InfeasibleError("above L_max");
        row["length"] = length;
        row["fidelity"] = closed_form_fidelity(length, spec);
        row["infeasible"] = false;
      } catch (const InfeasibleError&) {
        row["length"] = nullptr;
        row["fidelity"] = nullptr;
        row["infeasible"] = true;
        any_infeasible = true;
      }
      rows.push_back(row);
    }
  } else {
    require(cfg.length_grid.size() >= 2,
            "minlength: need at least two grid lengths to interpolate");
    require(cfg.identity_bits <= cfg.length_grid.back() &&
                cfg.identity_bits >= cfg.length_grid.front(),
            "minlength: J must lie inside the L grid");
    table["mode"] = "measured";
    const AttackKind attack = cfg.attacks.front();
    const double fraction = cfg.adversary_fractions.front();
    auto cells = build_cells(cfg, cfg.length_grid, jobs);

    struct SeedRow {
      std::vector<std::pair<double, double>> fidelity;
      std::vector<CapacityCurve> curves;
    };
    std::map<std::uint64_t, SeedRow> per_seed;
    std::vector<std::function<void()>> tasks;
    for (auto seed : cfg.seeds) per_seed[seed];
    for (auto seed : cfg.seeds)
      for (int length : cfg.length_grid)
        tasks.push_back([&cfg, &cells, &per_seed, seed, length, attack, fraction]() {
          const auto& base = cells.at({seed, length});
          AttackRunner runner = make_attack_runner(cfg, base, attack, fraction);
          EstimateOptions opts;
          opts.round_cap = cfg.round_cap;
          CapacityCurve curve = estimate_capacity(
              base.embedded.model, base.key, base.message, runner,
              base.splits.test, opts);
          curve.seeds = {seed};
          auto& row = per_seed[seed];
          static std::mutex m;
          std::lock_guard<std::mutex> lock(m);
          row.curves.push_back(std::move(curve));
          row.fidelity.emplace_back(static_cast<double>(length),
                                    base.embedded.fidelity);
        });
    run_jobs(jobs, tasks);

    for (auto& [seed, row] : per_seed) {
      std::sort(row.fidelity.begin(), row.fidelity.end());
      std::sort(row.curves.begin(), row.curves.end(),
                [](const CapacityCurve& a, const CapacityCurve& b) {
                  return a.length < b.length;
                });
    }

    for (double delta : cfg.deltas) {
      json row;
      row["delta"] = delta;
      json per_seed_json = json::array();
      std::vector<double> lengths, fids;
      for (const auto& [seed, data] : per_seed) {
        json sj;
        sj["seed"] = seed;
        try {
          const auto r = min_message_length(make_fidelity_curve(data.fidelity),
                                            data.curves, cfg.identity_bits, delta);
          sj["length"] = r.length;
          sj["fidelity"] = r.fidelity;
          sj["infeasible"] = false;
          lengths.push_back(r.length);
          fids.push_back(r.fidelity);
        } catch (const InfeasibleError&) {
          sj["length"] = nullptr;
          sj["fidelity"] = nullptr;
          sj["infeasible"] = true;
        }
        per_seed_json.push_back(sj);
      }
      row["per_seed"] = per_seed_json;
      if (lengths.empty()) {
        row["infeasible"] = true;
        any_infeasible = true;
      } else {
        row["infeasible"] = false;
        double mean_len = 0, mean_fid = 0;
        for (double v : lengths) mean_len += v;
        for (double v : fids) mean_fid += v;
        row["length"] = mean_len / static_cast<double>(lengths.size());
        row["fidelity"] = mean_fid / static_cast<double>(fids.size());
        row["length_band"] = {*std::min_element(lengths.begin(), lengths.end()),
                              *std::max_element(lengths.begin(), lengths.end())};
      }
      rows.push_back(row);
    }
  }

  // deltas are processed in config order; when sorted ascending the minimal
  // length must be nondecreasing
  {
    double prev = -1;
    std::vector<std::pair<double, double>> feasible;
    for (const auto& row : rows)
      if (!row["infeasible"].get<bool>())
        feasible.emplace_back(row["delta"].get<double>(), row["length"].get<double>());
    std::sort(feasible.begin(), feasible.end());
    for (const auto& [d, l] : feasible) {
      if (l + 1e-9 < prev)
        throw std::runtime_error("minlength: lengths not monotone across deltas");
      prev = l;
    }
  }

  table["rows"] = rows;
  write_json(dir / "table.json", table);
  return any_infeasible ? 3 : 0;
}

int cmd_transfer(const ExperimentConfig& cfg, int jobs) {
  const fs::path dir = fs::path(cfg.out_dir) / "transfer";
  fs::create_directories(dir);
  auto cells = build_cells(cfg, {cfg.length_grid.front()}, jobs);
  for (auto& [k, cell] : cells) {
    const SeedPlan plan = derive_seeds(cell.seed);
    PerturbSpec spec;
    spec.sigma = cfg.mrov.sigma;
    spec.rounds = cfg.mrov.rounds;
    spec.reg_samples = cfg.mrov.reg_samples;
    spec.gen_samples = cfg.mrov.gen_samples;
    spec.seed = plan.mrov;
    MatchOptions mopts;
    mopts.tolerance = cfg.mrov.match_tolerance;
    mopts.max_iters = cfg.mrov.match_iters;
    const MatchResult pairs =
        build_matched_pairs(cell.embedded.model, cell.key, cell.message, spec, mopts);
    std::vector<std::vector<double>> kappas;
    kappas.reserve(pairs.pairs.size());
    for (const auto& p : pairs.pairs) kappas.push_back(p.kappa);
    GeneratorTrainOptions gopts;
    gopts.latent_dim = cfg.mrov.latent_dim;
    gopts.hidden_dim = cfg.mrov.hidden_dim;
    gopts.epochs = cfg.mrov.vae_epochs;
    gopts.seed = plan.mrov;
    const KeyPerturbGenerator gen = train_generator(kappas, cfg.scheme, gopts);

    const std::string tag = cell_tag(cfg, cell.length, cell.seed);
    save_generator_json(gen, dir / (tag + ".generator.json"));
    save_matched_pairs_csv(pairs, dir / (tag + ".matched_pairs.csv"));
    json j = provenance_json(cfg);
    j["seed"] = cell.seed;
    j["L"] = cell.length;
    j["matched"] = pairs.pairs.size();
    j["dropped"] = pairs.dropped;
    j["vae_final_loss"] = gen.loss_history.empty() ? 0.0 : gen.loss_history.back();
    j["transfer_gap_n300"] = check_distribution_transfer(
        cell.embedded.model, cell.key, cell.message, gen, cfg.mrov.sigma, 300,
        Rng(plan.mrov).split(0xce11u).base_seed());
    write_json(dir / (tag + ".diagnostics.json"), j);
  }
  return 0;
}

namespace {

json mrov_seed_report(const ExperimentConfig& cfg, const EmbeddedCell& cell) {
  const SeedPlan plan = derive_seeds(cell.seed);
  const int length = cell.length;

  // adversarially modify until the one-shot BER reaches the target
  AttackRunner runner =
      make_attack_runner(cfg, cell, cfg.attacks.front(), cfg.adversary_fractions.front());
  Model attacked = cell.embedded.model;
  const double base_acc = accuracy(cell.embedded.model, cell.splits.test);
  double one_shot = 0;
  int rounds = 0;
  while (rounds < cfg.round_cap) {
    attacked = runner.step(attacked);
    ++rounds;
    one_shot = ber(cell.message, verify(attacked, cell.key));
    if (one_shot >= cfg.mrov.target_ber) break;
  }
  const double delta = std::max(0.0, base_acc - accuracy(attacked, cell.splits.test));

  // the owner's generator: trained on the watermarked model, or loaded
  KeyPerturbGenerator gen;
  json diag;
  if (cfg.mrov.generator_path) {
    gen = load_generator_json(*cfg.mrov.generator_path);
    diag["generator"] = "loaded";
  } else {
    PerturbSpec spec;
    spec.sigma = cfg.mrov.sigma;
    spec.rounds = cfg.mrov.rounds;
    spec.reg_samples = cfg.mrov.reg_samples;
    spec.gen_samples = cfg.mrov.gen_samples;
    spec.seed = plan.mrov;
    MatchOptions mopts;
    mopts.tolerance = cfg.mrov.match_tolerance;
    mopts.max_iters = cfg.mrov.match_iters;
    const MatchResult pairs = build_matched_pairs(cell.embedded.model, cell.key,
                                                  cell.message, spec, mopts);
    std::vector<std::vector<double>> kappas;
    for (const auto& p : pairs.pairs) kappas.push_back(p.kappa);
    GeneratorTrainOptions gopts;
    gopts.latent_dim = cfg.mrov.latent_dim;
    gopts.hidden_dim = cfg.mrov.hidden_dim;
    gopts.epochs = cfg.mrov.vae_epochs;
    gopts.seed = plan.mrov;
    gen = train_generator(kappas, cfg.scheme, gopts);
    diag["generator"] = "trained";
    diag["matched"] = pairs.pairs.size();
    diag["dropped"] = pairs.dropped;
    diag["vae_final_loss"] = gen.loss_history.empty() ? 0.0 : gen.loss_history.back();
  }

  const std::uint64_t judge_seed = Rng(plan.mrov).split(0xFACEu).base_seed();
  const std::uint64_t hash_before = param_hash(attacked);
  const double v1 =
      ber(cell.message, mrov_v_verify(attacked, cell.key, gen, cfg.mrov.rounds,
                                      judge_seed));
  const bool hash_unchanged = param_hash(attacked) == hash_before;

  // MROV-V-2: fine-tune with the key-noise regularizer, then re-attack with
  // the same round budget
  TrainConfig v2cfg = cfg.train;
  v2cfg.epochs = cfg.embed_epochs;
  v2cfg.lambda = cfg.embed_lambda;
  v2cfg.seed = Rng(plan.mrov).split(7).base_seed();
  const EmbedResult v2 =
      embed_robust_key(cell.embedded.model, cell.key, cell.message, gen,
                       cfg.mrov.reg_samples, cell.splits.train, cell.splits.test,
                       v2cfg);
  AttackRunner runner2 =
      make_attack_runner(cfg, cell, cfg.attacks.front(), cfg.adversary_fractions.front());
  Model attacked2 = v2.model;
  for (int r = 0; r < rounds; ++r) attacked2 = runner2.step(attacked2);
  const double v2_attacked_ber =
      ber(cell.message, mrov_v_verify(attacked2, cell.key, gen, cfg.mrov.rounds,
                                      judge_seed));

  json j;
  j["seed"] = cell.seed;
  j["L"] = length;
  j["attack"] = to_string(cfg.attacks.front());
  j["attack_rounds"] = rounds;
  j["delta"] = delta;
  j["baseline"] = {{"ber", one_shot},
                   {"capacity_bound", capacity_bound(length, one_shot)}};
  j["mrov_v1"] = {{"ber", v1},
                  {"capacity_bound", capacity_bound(length, v1)},
                  {"model_hash_unchanged", hash_unchanged},
                  {"fidelity", cell.embedded.fidelity}};
  j["mrov_v2"] = {{"ber_attacked", v2_attacked_ber},
                  {"capacity_bound_attacked", capacity_bound(length, v2_attacked_ber)},
                  {"fidelity", cell.embedded.fidelity + v2.fidelity},
                  {"roundtrip_ber",
                   ber(cell.message, mrov_v_verify(v2.model, cell.key, gen,
                                                   cfg.mrov.rounds, judge_seed))}};
  j["diagnostics"] = diag;
  return j;
}

}  // namespace

int cmd_mrov(const ExperimentConfig& cfg, int jobs) {
  require(!cfg.attacks.empty(), "mrov: attack list must be nonempty");
  if (cfg.mrov.generator_path) {
    require(cfg.seeds.size() == 1,
            "mrov: generator_path only makes sense with a single seed");
    require(fs::exists(*cfg.mrov.generator_path),
            "mrov: generator file not found: " + *cfg.mrov.generator_path +
                " (run the transfer command first or drop generator_path)");
  }
  const fs::path dir = fs::path(cfg.out_dir) / "mrov";
  fs::create_directories(dir);
  auto cells = build_cells(cfg, {cfg.length_grid.front()}, jobs);

  std::vector<json> reports(cfg.seeds.size());
  std::vector<std::function<void()>> tasks;
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i)
    tasks.push_back([&, i]() {
      reports[i] = mrov_seed_report(cfg, cells.at({cfg.seeds[i], cfg.length_grid.front()}));
    });
  run_jobs(jobs, tasks);

  json out = provenance_json(cfg);
  out["scheme"] = to_string(cfg.scheme);
  out["R"] = cfg.mrov.rounds;
  out["per_seed"] = reports;
  write_json(dir / "ab_comparison.json", out);
  return 0;
}

namespace {

double brute_avg_lost_bits(int classes) {
  const int bits = static_cast<int>(std::floor(std::log2(classes)));
  double total = 0;
  int count = 0;
  for (int y = 0; y < classes; ++y)
    for (int other = 0; other < classes; ++other) {
      if (other == y) continue;
      int d = 0;
      for (int k = 0; k < bits; ++k)
        d += ((y >> k) & 1) != ((other >> k) & 1);
      total += d;
      ++count;
    }
  return total / static_cast<double>(count);
}

}  // namespace

int cmd_check(const ExperimentConfig& cfg, int jobs) {
  (void)jobs;
  const fs::path dir = fs::path(cfg.out_dir) / "check";
  fs::create_directories(dir);
  const auto prov = provenance_lines(cfg);
  bool all_ok = true;
  auto report = [&all_ok](const std::string& name, bool ok) {
    std::cout << (ok ? "PASS " : "FAIL ") << name << "\n";
    all_ok = all_ok && ok;
  };

  {  // entropy / capacity bound grid
    std::string csv = "# wmcap-v1\n";
    for (const auto& p : prov) csv += "# " + p + "\n";
    csv += "x,entropy,capacity_bound_256\n";
    bool ok = true;
    for (int i = 0; i <= 20; ++i) {
      const double x = 0.025 * i;
      const double h = binary_entropy(x);
      const double c = capacity_bound(256, std::min(x, 0.5));
      ok = ok && std::abs(h - binary_entropy(1.0 - x)) < 1e-15 && c >= 0 && c <= 256;
      csv += fmt(x) + "," + fmt(h) + "," + fmt(c) + "\n";
    }
    write_text(dir / "entropy_grid.csv", csv);
    report("check:entropy_grid", ok);
  }

  {  // closed form vs numeric solver
    std::string csv = "# wmcap-v1\n";
    for (const auto& p : prov) csv += "# " + p + "\n";
    csv += "J,delta,B,D,closed,numeric,rel_err\n";
    bool ok = true;
    for (int b : {2, 10, 100})
      for (double d : {1e4, 1e5})
        for (double jbits : {64.0, 256.0, 1024.0})
          for (double delta : {0.005, 0.01, 0.02, 0.03}) {
            ClassifierSpec spec{b, d, jbits, delta};
            const double closed = closed_form_min_length(spec);
            const double numeric = solve_min_length_numeric(spec);
            const double rel = std::abs(closed - numeric) / std::max(1.0, numeric);
            ok = ok && rel < 1e-6;
            csv += fmt(jbits) + "," + fmt(delta) + "," + std::to_string(b) + "," +
                   fmt(d) + "," + fmt(closed) + "," + fmt(numeric) + "," + fmt(rel) +
                   "\n";
          }
    write_text(dir / "oracle_grid.csv", csv);
    report("check:minlength_oracle", ok);
  }

  {  // avg lost bits vs brute force
    std::string csv = "# wmcap-v1\n";
    for (const auto& p : prov) csv += "# " + p + "\n";
    csv += "B,closed,brute,abs_err\n";
    bool ok = true;
    for (int b : {2, 4, 8, 16}) {
      const double closed = avg_lost_bits(b);
      const double brute = brute_avg_lost_bits(b);
      ok = ok && std::abs(closed - brute) <= 1e-12;
      csv += std::to_string(b) + "," + fmt(closed) + "," + fmt(brute) + "," +
             fmt(std::abs(closed - brute)) + "\n";
    }
    write_text(dir / "avg_lost_bits.csv", csv);
    report("check:avg_lost_bits", ok);
  }

  {  // majority vote against a direct counting oracle
    Rng rng(cfg.seeds.front());
    bool ok = true;
    for (int trial = 0; trial < 50; ++trial) {
      const std::size_t length = 1 + rng.uniform_int(32);
      const int votes = 1 + static_cast<int>(rng.uniform_int(9));
      std::vector<IdentityMessage> rounds;
      for (int v = 0; v < votes; ++v) rounds.push_back(uniform_message(length, rng));
      const IdentityMessage got = majority_vote(rounds);
      for (std::size_t i = 0; i < length; ++i) {
        int ones = 0;
        for (const auto& r : rounds) ones += r.bits[i];
        const int expect = 2 * ones > votes ? 1 : 0;
        ok = ok && got.bits[i] == expect;
      }
    }
    report("check:majority_vote", ok);
  }

  {  // seeded mini pipeline, golden curve
    ExperimentConfig mini = cfg;
    mini.round_cap = std::min(cfg.round_cap, 40);
    const EmbeddedCell cell =
        build_embedded_cell(mini, mini.seeds.front(), mini.length_grid.front());
    AttackRunner runner = make_attack_runner(mini, cell, mini.attacks.front(),
                                             mini.adversary_fractions.front());
    EstimateOptions opts;
    opts.round_cap = mini.round_cap;
    CapacityCurve curve = estimate_capacity(cell.embedded.model, cell.key,
                                            cell.message, runner,
                                            cell.splits.test, opts);
    curve.seeds = {mini.seeds.front()};
    save_curve_csv(curve, dir / "mini_curve.csv", prov);
    bool ok = cell.embedded.final_ber == 0.0 && !curve.records.empty() &&
              curve.records.front().delta == 0.0;
    const CapacityCurve env = monotone_envelope(curve);
    for (const auto& a : env.records)
      for (const auto& b : env.records)
        if (a.delta <= b.delta) ok = ok && a.c_hat >= b.c_hat - 1e-9;
    report("check:mini_pipeline", ok);
  }

  return all_ok ? 0 : 1;
}

}  // namespace wmcap
