#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <sys/wait.h>
#include <unistd.h>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "json.hpp"
#include "wmcap/errors.hpp"
#include "wmcap/experiment.hpp"

using namespace wmcap;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("wmcap_cli_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

json base_config(const fs::path& out) {
  json j;
  j["scheme"] = "white_box";
  j["L_grid"] = {64};
  j["J"] = 64;
  j["seeds"] = {0};
  j["attacks"] = {"adv_overwrite"};
  j["adversary_fractions"] = {0.1};
  j["data"] = {{"classes", 10}, {"dim", 16}, {"samples", 2000},
               {"test_fraction", 0.5}, {"seed", 1}};
  j["train"] = {{"learning_rate", 0.05}, {"batch_size", 32}, {"epochs", 60}};
  j["embed"] = {{"epochs", 40}, {"lambda", 1.0}};
  j["round_cap"] = 60;
  j["out_dir"] = out.string();
  return j;
}

fs::path write_config(const fs::path& dir, const json& j,
                      const std::string& name = "config.json") {
  const fs::path p = dir / name;
  std::ofstream out(p);
  out << j.dump(2);
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(WMCAP_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

json slurp_json(const fs::path& p) { return json::parse(slurp(p)); }

}  // namespace

TEST_CASE("config validation") {
  TempDir tmp;
  SUBCASE("missing file exits 2") { CHECK(run_cli("estimate /nonexistent.json") == 2); }
  SUBCASE("malformed json exits 2") {
    const fs::path p = tmp.path / "bad.json";
    std::ofstream(p) << "{ not json";
    CHECK(run_cli("estimate " + p.string()) == 2);
  }
  SUBCASE("unknown keys are rejected") {
    json j = base_config(tmp.path / "out");
    j["tpyo"] = 1;
    CHECK(run_cli("estimate " + write_config(tmp.path, j).string()) == 2);
  }
  SUBCASE("empty attack list is rejected") {
    json j = base_config(tmp.path / "out");
    j["attacks"] = json::array();
    CHECK(run_cli("estimate " + write_config(tmp.path, j).string()) == 2);
    j["attacks"] = {"bogus"};
    CHECK(run_cli("estimate " + write_config(tmp.path, j, "c2.json").string()) == 2);
  }
  SUBCASE("duplicate seeds are rejected") {
    json j = base_config(tmp.path / "out");
    j["seeds"] = {3, 3};
    CHECK(run_cli("estimate " + write_config(tmp.path, j).string()) == 2);
  }
}

TEST_CASE("embed command writes the full artifact set") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["L_grid"] = {256};
  j["embed"] = {{"epochs", 30}, {"lambda", 0.1}};
  const fs::path cfg_path = write_config(tmp.path, j);
  REQUIRE(run_cli("embed " + cfg_path.string()) == 0);

  const fs::path dir = tmp.path / "out" / "embed";
  CHECK(fs::exists(dir / "white_box_L256_seed0.model.json"));
  CHECK(fs::exists(dir / "white_box_L256_seed0.key.json"));
  CHECK(fs::exists(dir / "white_box_L256_seed0.msg.hex"));

  const json fid = slurp_json(dir / "white_box_L256_seed0.fidelity.json");
  CHECK(fid.at("final_ber").get<double>() == 0.0);
  CHECK(fid.contains("config_hash"));
  CHECK(fid.contains("param_hash"));
  CHECK(fid.at("seeds").size() == 1);

  // artifacts reload into consistent objects
  const Model model = load_model_json(dir / "white_box_L256_seed0.model.json");
  const OwnershipKey key = load_key_json(dir / "white_box_L256_seed0.key.json");
  std::string hex = slurp(dir / "white_box_L256_seed0.msg.hex");
  while (!hex.empty() && (hex.back() == '\n' || hex.back() == ' ')) hex.pop_back();
  const IdentityMessage msg = message_from_hex(hex, 256);
  CHECK(verify(model, key) == msg);
}

TEST_CASE("embed command handles the three-bit interpreter case") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["scheme"] = "black_box";
  j["L_grid"] = {9};
  j["embed"] = {{"epochs", 20}, {"lambda", 1.0}};
  const fs::path cfg_path = write_config(tmp.path, j);
  REQUIRE(run_cli("embed " + cfg_path.string()) == 0);
  const json key = slurp_json(tmp.path / "out" / "embed" / "black_box_L9_seed0.key.json");
  CHECK(key.at("triggers").size() == 3u * 16u);  // ceil(9/3) triggers
}

TEST_CASE("estimate single cell matches the library byte for byte") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  const fs::path cfg_path = write_config(tmp.path, j);
  REQUIRE(run_cli("estimate " + cfg_path.string()) == 0);

  const fs::path csv_path =
      tmp.path / "out" / "estimate" / "white_box_adv_overwrite_L64_frac10_seed0.csv";
  REQUIRE(fs::exists(csv_path));

  const ExperimentConfig cfg = load_experiment_config(cfg_path);
  const EmbeddedCell cell = build_embedded_cell(cfg, 0, 64);
  AttackRunner runner = make_attack_runner(cfg, cell, AttackKind::AdvOverwrite, 0.1);
  EstimateOptions opts;
  opts.round_cap = cfg.round_cap;
  CapacityCurve curve = estimate_capacity(cell.embedded.model, cell.key, cell.message,
                                          runner, cell.splits.test, opts);
  curve.seeds = {0};
  const std::string expected =
      curve_csv_string(curve, {"config=" + config_hash(cfg), "seeds=0"});
  CHECK(slurp(csv_path) == expected);

  const json agg = slurp_json(tmp.path / "out" / "estimate" /
                              "aggregate_white_box_adv_overwrite_L64_frac10.json");
  CHECK(agg.at("L").get<int>() == 64);
  CHECK(agg.at("mean_curve").contains("delta"));
  CHECK(agg.at("band").contains("lo"));
}

TEST_CASE("csv outputs carry the schema marker") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["round_cap"] = 5;
  const fs::path cfg_path = write_config(tmp.path, j);
  REQUIRE(run_cli("estimate " + cfg_path.string()) == 0);
  const std::string csv = slurp(tmp.path / "out" / "estimate" /
                                "white_box_adv_overwrite_L64_frac10_seed0.csv");
  CHECK(csv.rfind("# wmcap-v1\n", 0) == 0);
  CHECK(csv.find("# config=") != std::string::npos);
  CHECK(csv.find("# seeds=0") != std::string::npos);
}

TEST_CASE("minlength synthetic mode") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["J"] = 1024;
  j["L_max"] = 1 << 20;
  j["deltas"] = {0.0, 0.01, 0.02, 0.03};
  j["synthetic"] = {{"classes", 10}, {"train_size", 100000}};
  const fs::path cfg_path = write_config(tmp.path, j);
  REQUIRE(run_cli("minlength " + cfg_path.string()) == 0);

  const json table = slurp_json(tmp.path / "out" / "minlength" / "table.json");
  const auto& rows = table.at("rows");
  REQUIRE(rows.size() == 4);
  CHECK(rows[0].at("delta").get<double>() == 0.0);
  CHECK(rows[0].at("length").get<double>() == 1024.0);  // delta 0 keeps L = J

  double prev = 0;
  for (const auto& row : rows) {
    REQUIRE_FALSE(row.at("infeasible").get<bool>());
    const double cur = row.at("length").get<double>();
    CHECK(cur >= prev);
    prev = cur;
  }
  // closed form at delta 0.02: 1063.3248...
  CHECK(rows[2].at("length").get<double>() == doctest::Approx(1063.3248).epsilon(1e-4));
}

TEST_CASE("minlength reports infeasibility with exit code 3") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["J"] = 1024;
  j["L_max"] = 2000;
  j["deltas"] = {0.5};
  j["synthetic"] = {{"classes", 10}, {"train_size", 100000}};
  const fs::path cfg_path = write_config(tmp.path, j);
  CHECK(run_cli("minlength " + cfg_path.string()) == 3);
  const json table = slurp_json(tmp.path / "out" / "minlength" / "table.json");
  CHECK(table.at("rows")[0].at("infeasible").get<bool>());
}

TEST_CASE("mrov with one round and a zero generator reduces to the baseline") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["scheme"] = "black_box";
  j["L_grid"] = {16};
  j["embed"] = {{"epochs", 25}, {"lambda", 1.0}};
  j["round_cap"] = 40;

  // judge-side zero generator: K + G(z) == K
  const ExperimentConfig pre = load_experiment_config(write_config(tmp.path, j, "pre.json"));
  const EmbeddedCell cell = build_embedded_cell(pre, 0, 16);
  const fs::path gen_path = tmp.path / "zero_gen.json";
  save_generator_json(zero_generator(static_cast<int>(key_perturb_dim(cell.key)),
                                     SchemeKind::BlackBox),
                      gen_path);

  j["mrov"] = {{"sigma", 0.02}, {"rounds", 1}, {"reg_samples", 1},
               {"gen_samples", 1}, {"target_ber", 0.1},
               {"generator_path", gen_path.string()}};
  const fs::path cfg_path = write_config(tmp.path, j);
  REQUIRE(run_cli("mrov " + cfg_path.string()) == 0);

  const json ab = slurp_json(tmp.path / "out" / "mrov" / "ab_comparison.json");
  const auto& seed0 = ab.at("per_seed")[0];
  CHECK(seed0.at("mrov_v1").at("ber").get<double>() ==
        seed0.at("baseline").at("ber").get<double>());
  CHECK(seed0.at("mrov_v1").at("model_hash_unchanged").get<bool>());
}

TEST_CASE("mrov with a missing generator file is an actionable config error") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["mrov"] = {{"generator_path", (tmp.path / "nope.json").string()}};
  CHECK(run_cli("mrov " + write_config(tmp.path, j).string()) == 2);
}

TEST_CASE("WMCAP_OUT overrides the configured output directory") {
  TempDir tmp;
  json j = base_config(tmp.path / "ignored");
  j["J"] = 64;
  j["deltas"] = {0.01};
  j["synthetic"] = {{"classes", 10}, {"train_size", 100000}};
  j["L_max"] = 1 << 20;
  const fs::path cfg_path = write_config(tmp.path, j);
  const fs::path redirected = tmp.path / "redirected";
  const std::string cmd = "WMCAP_OUT=" + redirected.string() + " " +
                          std::string(WMCAP_CLI_PATH) + " minlength " +
                          cfg_path.string() + " >/dev/null 2>&1";
  REQUIRE(WEXITSTATUS(std::system(cmd.c_str())) == 0);
  CHECK(fs::exists(redirected / "minlength" / "table.json"));
  CHECK_FALSE(fs::exists(tmp.path / "ignored"));
}

TEST_CASE("seed plans derive distinct sub-seeds") {
  const SeedPlan a = derive_seeds(0);
  const SeedPlan b = derive_seeds(1);
  CHECK(a.model_init != b.model_init);
  CHECK(a.key != a.train);
  CHECK(a.key != a.message);
  CHECK(derive_seeds(0).model_init == a.model_init);
}

TEST_CASE("attack command writes round logs and the attacked model") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["round_cap"] = 10;
  REQUIRE(run_cli("attack " + write_config(tmp.path, j).string()) == 0);
  const fs::path dir = tmp.path / "out" / "attack";
  CHECK(fs::exists(dir / "white_box_adv_overwrite_L64_frac10_seed0.csv"));
  const Model attacked =
      load_model_json(dir / "white_box_adv_overwrite_L64_frac10_seed0.model.json");
  CHECK(attacked.param_count() == 3498);
}

TEST_CASE("transfer command trains and saves a generator") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["scheme"] = "black_box";
  j["L_grid"] = {16};
  j["embed"] = {{"epochs", 25}, {"lambda", 1.0}};
  j["mrov"] = {{"sigma", 0.02}, {"gen_samples", 150}, {"vae_epochs", 15}};
  REQUIRE(run_cli("transfer " + write_config(tmp.path, j).string()) == 0);
  const fs::path dir = tmp.path / "out" / "transfer";
  const KeyPerturbGenerator gen =
      load_generator_json(dir / "black_box_L16_seed0.generator.json");
  CHECK(gen.out_dim == 6 * 16);  // ceil(16/3) triggers x input dim
  CHECK(fs::exists(dir / "black_box_L16_seed0.matched_pairs.csv"));
  const json diag = slurp_json(dir / "black_box_L16_seed0.diagnostics.json");
  CHECK(diag.at("matched").get<int>() + diag.at("dropped").get<int>() == 150);
}

TEST_CASE("seed offset shifts every configured seed") {
  TempDir tmp;
  json j = base_config(tmp.path / "out");
  j["round_cap"] = 3;
  REQUIRE(run_cli("estimate " + write_config(tmp.path, j).string() +
                  " --seed-offset 5") == 0);
  CHECK(fs::exists(tmp.path / "out" / "estimate" /
                   "white_box_adv_overwrite_L64_frac10_seed5.csv"));
}

TEST_CASE("worker pool does not change results") {
  TempDir tmp;
  json j = base_config(tmp.path / "out1");
  j["seeds"] = {0, 1};
  j["round_cap"] = 5;
  REQUIRE(run_cli("estimate " + write_config(tmp.path, j, "c1.json").string()) == 0);
  j["out_dir"] = (tmp.path / "out2").string();
  REQUIRE(run_cli("estimate " + write_config(tmp.path, j, "c2.json").string() +
                  " --jobs 2") == 0);
  for (const auto& entry : fs::directory_iterator(tmp.path / "out1" / "estimate")) {
    const fs::path other = tmp.path / "out2" / "estimate" / entry.path().filename();
    REQUIRE(fs::exists(other));
    CHECK(slurp(entry.path()) == slurp(other));
  }
}
