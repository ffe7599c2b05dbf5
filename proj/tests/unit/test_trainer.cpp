#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "doctest.h"
#include "xane3/data/synth.hpp"
#include "xane3/errors.hpp"
#include "xane3/model/checkpoint.hpp"
#include "xane3/train/trainer.hpp"

using namespace xane3;
using namespace xane3::train;

namespace {

namespace fs = std::filesystem;

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

std::vector<graph::Record> singles(std::size_t n) {
  // Distinct one-atom-absorber structures built from a rattled rocksalt cell.
  std::vector<graph::Record> out;
  for (std::size_t i = 0; i < n; ++i) {
    synth::StructureOptions o;
    auto s = synth::gen_structure(i, o);
    graph::Record r;
    r.structure = s;
    r.structure.absorber_sites = {s.absorber_sites[0]};
    r.spectrum.assign(150, static_cast<double>(i));
    r.e0 = 7112.0;
    out.push_back(r);
  }
  return out;
}

RunConfig tiny_run(std::size_t epochs) {
  RunConfig c;
  c.model = model::ModelConfig::tiny();
  c.model.grid = spectra::SpectrumGrid{};
  c.model.radial_count = 8;
  c.model.readout_hidden = 32;
  c.model.attention_hidden = 16;
  c.model.gate_hidden = 16;
  c.model.e0_hidden = 16;
  c.train.max_epochs = epochs;
  c.train.seed = 4;
  c.loss.anneal_start = 1;
  c.loss.anneal_len = 2;
  return c;
}

}  // namespace

TEST_CASE("AdamW closed forms") {
  TrainConfig cfg;
  SUBCASE("zero gradients without decay leave parameters alone") {
    ad::ParamStore ps;
    ps.add("w", {3}, {1.0, -2.0, 0.5});
    cfg.weight_decay = 0;
    AdamW opt(ps, cfg);
    ps.zero_grad();
    opt.step(1e-2);
    CHECK(ps.flatten() == std::vector<double>{1.0, -2.0, 0.5});
  }
  SUBCASE("zero gradients with decay shrink multiplicatively") {
    ad::ParamStore ps;
    ps.add("w", {2}, {1.0, -4.0});
    ps.add("basis.centers", {2}, {3.0, 5.0});
    AdamW opt(ps, cfg);
    ps.zero_grad();
    opt.step(0.1);
    CHECK(ps.get("w")[0] == 1.0 * (1 - 0.1 * 0.01));
    CHECK(ps.get("w")[1] == -4.0 * (1 - 0.1 * 0.01));
    // Basis parameters are exempt from weight decay.
    CHECK(ps.get("basis.centers")[0] == 3.0);
  }
  SUBCASE("first step is lr * g / (|g| + eps)") {
    ad::ParamStore ps;
    auto w = ps.add("w", {2}, {0.5, 0.5});
    cfg.weight_decay = 0;
    AdamW opt(ps, cfg);
    w.grad_buffer()[0] = 3.0;
    w.grad_buffer()[1] = -1e-9;
    opt.step(1e-3);
    CHECK(w[0] == doctest::Approx(0.5 - 1e-3 * 3.0 / (3.0 + 1e-8)).epsilon(1e-14));
    CHECK(w[1] == doctest::Approx(0.5 + 1e-3 * 1e-9 / (1e-9 + 1e-8)).epsilon(1e-14));
    CHECK(opt.steps() == 1);
  }
  SUBCASE("several steps match a scalar reference") {
    ad::ParamStore ps;
    auto w = ps.add("w", {1}, {2.0});
    AdamW opt(ps, cfg);
    double x = 2.0, m = 0, v = 0;
    const double grads[] = {0.3, -1.2, 0.7, 0.05};
    for (int t = 1; t <= 4; ++t) {
      ps.zero_grad();
      w.grad_buffer()[0] = grads[t - 1];
      opt.step(0.01);
      const double g = grads[t - 1];
      x *= 1 - 0.01 * 0.01;
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
      x -= 0.01 * mh / (std::sqrt(vh) + 1e-8);
      CHECK(w[0] == doctest::Approx(x).epsilon(1e-13));
    }
  }
  SUBCASE("non-finite gradients abort") {
    ad::ParamStore ps;
    auto w = ps.add("w", {1}, {2.0});
    AdamW opt(ps, cfg);
    w.grad_buffer()[0] = std::nan("");
    CHECK_THROWS_AS(opt.step(0.01), NonFiniteError);
    CHECK(w[0] == 2.0);
  }
}

TEST_CASE("plateau scheduler") {
  PlateauScheduler s(1e-3, 0.5, 10, 1e-5);
  CHECK(s.step(1.0) == 1e-3);
  for (int i = 1; i < 10; ++i) CHECK(s.step(1.0) == 1e-3);
  CHECK(s.step(1.0) == 5e-4);  // tenth non-improving epoch
  CHECK(s.bad_epochs() == 0);
  CHECK(s.step(0.5) == 5e-4);  // improvement resets
  CHECK(s.best() == 0.5);
  double prev = s.lr();
  for (int i = 0; i < 200; ++i) {
    const double lr = s.step(2.0);
    CHECK(lr <= prev);
    CHECK(lr >= 1e-5);
    prev = lr;
  }
  CHECK(s.lr() == 1e-5);
  CHECK_THROWS_AS(PlateauScheduler(1e-3, 1.5, 10, 1e-5), ConfigError);
}

TEST_CASE("divergence guard") {
  DivergenceGuard g(10.0, 5);
  CHECK_FALSE(g.update(1.0));
  for (int i = 0; i < 4; ++i) CHECK_FALSE(g.update(11.0));
  CHECK_FALSE(g.update(5.0));  // streak broken
  for (int i = 0; i < 4; ++i) CHECK_FALSE(g.update(20.0));
  CHECK(g.update(20.0));
  DivergenceGuard h(10.0, 2);
  CHECK_FALSE(h.update(1.0));
  CHECK_FALSE(h.update(std::nan("")));
  CHECK(h.update(std::numeric_limits<double>::infinity()));
}

TEST_CASE("dataset split") {
  auto recs = singles(100);
  auto s = split_dataset(recs, 3);
  CHECK(s.train.size() == 80);
  CHECK(s.val.size() == 10);
  CHECK(s.test.size() == 10);
  std::set<std::size_t> all(s.train.begin(), s.train.end());
  all.insert(s.val.begin(), s.val.end());
  all.insert(s.test.begin(), s.test.end());
  CHECK(all.size() == 100);
  auto again = split_dataset(recs, 3);
  CHECK(again.test == s.test);
  CHECK(again.val == s.val);
  CHECK(split_dataset(recs, 4).test != s.test);

  // 12 records: floor(1.2) = 1 each for val and test, remainder to train.
  auto small = split_dataset(singles(12), 0);
  CHECK(small.train.size() == 10);
  CHECK(small.val.size() == 1);
  CHECK(small.test.size() == 1);
  CHECK_THROWS_AS(split_dataset(singles(9), 0), ValueError);

  // Absorbers of one structure always land in the same split.
  synth::DatasetOptions o;
  o.n = 200;
  auto data = synth::generate_dataset(o);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto sp = split_dataset(data, seed);
    std::map<std::string, int> where;
    auto mark = [&](const std::vector<std::size_t>& idx, int tag) {
      for (auto i : idx) {
        auto key = graph::structure_key(data[i].structure);
        auto [it, fresh] = where.emplace(key, tag);
        CHECK(it->second == tag);
      }
    };
    mark(sp.train, 0);
    mark(sp.val, 1);
    mark(sp.test, 2);
    CHECK(sp.val.size() <= 20);
    CHECK(sp.test.size() <= 20);
    CHECK(sp.val.size() >= 12);
    CHECK(sp.test.size() >= 12);
  }
  CHECK_THROWS_AS(split_dataset(recs, 0, {0.5, 0.2, 0.2}), ConfigError);
}

TEST_CASE("run config json and overrides") {
  RunConfig c;
  c.data = "data.jsonl";
  c.model.layers = 3;
  c.train.seed = 9;
  auto back = run_config_from_json(to_json(c));
  CHECK(to_json(back) == to_json(c));

  apply_override(c, "model.layers=2");
  apply_override(c, "train.lr0=0.01");
  apply_override(c, "loss.lambda_grad=0");
  apply_override(c, "model.basis.per_scale=10");
  apply_override(c, "data=other.jsonl");
  apply_override(c, "train.split=[0.6,0.2,0.2]");
  CHECK(c.model.layers == 2);
  CHECK(c.train.lr0 == 0.01);
  CHECK(c.loss.lambda_grad == 0.0);
  CHECK(c.model.basis.per_scale == 10);
  CHECK(c.data == "other.jsonl");
  CHECK(c.train.split[0] == 0.6);
  CHECK_THROWS_AS(apply_override(c, "model.layrs=2"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "train.lr0=fast"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "train.max_epochs=-3"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "model.layers"), ConfigError);
  CHECK_THROWS_AS(apply_override(c, "nope.x=1"), ConfigError);
  CHECK_THROWS_AS(run_config_from_json({{"trian", nlohmann::json::object()}}), ConfigError);
  CHECK_THROWS_AS(load_run_config("/nonexistent/run.json"), IoError);
}

TEST_CASE("ablation toggles") {
  CHECK(ablation_names().front() == "baseline");
  for (const auto& name : ablation_names()) {
    RunConfig c;
    apply_ablation(c, name);
    c.validate();
    if (name == "no_derivative_loss") CHECK((c.loss.lambda_grad == 0 && c.loss.lambda_curv == 0));
    if (name == "no_background") CHECK_FALSE(c.model.use_background);
    if (name == "no_gated_residual") CHECK_FALSE(c.model.use_gated_residual);
    if (name == "mean_pooling") CHECK_FALSE(c.model.use_attention_pool);
    if (name == "no_layernorm") CHECK_FALSE(c.model.use_layernorm);
    if (name == "scalar_only") {
      CHECK(c.model.hidden_m0() == 63);
      CHECK(c.model.hidden_m1() == 0);
      CHECK(c.model.hidden_m2() == 0);
    }
    if (name == "single_scale_basis") CHECK(c.model.effective_basis().gaussians() == 200);
  }
  RunConfig c;
  CHECK_THROWS_AS(apply_ablation(c, "no_attention"), ConfigError);
}

TEST_CASE("training loop is deterministic and writes artifacts") {
  synth::DatasetOptions o;
  o.n = 40;
  o.seed = 2;
  const auto data = synth::generate_dataset(o);
  const auto cfg = tiny_run(4);
  const fs::path a = fs::temp_directory_path() / "xane3_train_a", b = fs::temp_directory_path() / "xane3_train_b";
  fs::remove_all(a);
  fs::remove_all(b);

  std::size_t calls = 0;
  TrainOptions opts;
  opts.out = a;
  opts.on_epoch = [&](const EpochMetrics& tr, const EpochMetrics& va) {
    CHECK(tr.split == "train");
    CHECK(va.split == "val");
    CHECK(tr.epoch == calls++);
  };
  std::unique_ptr<model::Model> ma, mb;
  auto ra = train_run(cfg, data, opts, &ma);
  opts.out = b;
  opts.on_epoch = nullptr;
  auto rb = train_run(cfg, data, opts, &mb);

  CHECK(calls == 4);
  CHECK(ra.epochs_run == 4);
  CHECK(ra.history.size() == 8);
  CHECK(slurp(a / "metrics.jsonl") == slurp(b / "metrics.jsonl"));
  CHECK(slurp(a / "best" / model::kParamsFile) == slurp(b / "best" / model::kParamsFile));
  CHECK(slurp(a / "best" / model::kManifestFile) == slurp(b / "best" / model::kManifestFile));
  CHECK(ma->params().flatten() == mb->params().flatten());
  CHECK(ra.test.spec == rb.test.spec);

  // Metrics lines carry exactly the documented keys.
  std::ifstream in(a / "metrics.jsonl");
  std::string line;
  std::size_t lines = 0;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    std::set<std::string> keys;
    for (auto& [k, v] : j.items()) keys.insert(k);
    CHECK(keys == std::set<std::string>{"epoch", "split", "loss_total", "loss_spec", "loss_grad", "loss_curv",
                                        "loss_e0", "lr"});
    ++lines;
  }
  CHECK(lines == 8);

  // The saved best checkpoint reproduces the returned model and the test metrics.
  auto ck = model::load_checkpoint(a / "best");
  CHECK(ck.model->params().flatten() == ma->params().flatten());
  CHECK(ck.e0.mean == ra.e0_norm.mean);
  const auto prepared = prepare(*ck.model, data);
  auto test = evaluate(*ck.model, prepared, ra.split.test, ck.e0, cfg.train.batch_size);
  CHECK(test.spec == ra.test.spec);
  CHECK(ck.extra["best_epoch"] == ra.best_epoch);

  // Derivative weights follow the annealing schedule in the logged totals.
  const auto& first = ra.history[0];
  CHECK(first.loss_total == doctest::Approx(first.terms.spec + 0.1 * first.terms.e0).epsilon(1e-12));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("training reduces the loss") {
  synth::DatasetOptions o;
  o.n = 60;
  o.seed = 5;
  const auto data = synth::generate_dataset(o);
  auto cfg = tiny_run(25);
  cfg.train.lr0 = 3e-3;
  auto r = train_run(cfg, data);
  double first_val = 0, last_val = 0;
  for (const auto& m : r.history) {
    if (m.split != "val") continue;
    if (m.epoch == 0) first_val = m.terms.spec;
    last_val = m.terms.spec;
  }
  CHECK(last_val < 0.5 * first_val);
  // Selection uses the final weights at every epoch.
  const auto& v0 = r.history[1].terms;
  CHECK(r.best_val <= v0.spec + v0.grad + v0.curv + 0.1 * v0.e0);
  auto report = table_report({{"tiny", r.test}});
  CHECK(report.find("tiny") != std::string::npos);
  CHECK(report.find("x1e-3") != std::string::npos);
}

TEST_CASE("training rejects bad inputs") {
  auto cfg = tiny_run(1);
  CHECK_THROWS_AS(train_run(cfg, singles(5)), ValueError);
  cfg.train.batch_size = 0;
  CHECK_THROWS_AS(train_run(cfg, singles(20)), ConfigError);
  cfg = tiny_run(1);
  auto recs = singles(20);
  recs[3].spectrum.resize(10);
  CHECK_THROWS_AS(train_run(cfg, recs), ShapeError);
}
