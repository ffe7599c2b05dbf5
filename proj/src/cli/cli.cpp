#include "xane3/cli/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"
#include "xane3/data/synth.hpp"
#include "xane3/errors.hpp"
#include "xane3/graph/dataset.hpp"
#include "xane3/model/checkpoint.hpp"
#include "xane3/spectra/spectra.hpp"
#include "xane3/train/trainer.hpp"
#include "xane3/verify/verify.hpp"

namespace xane3::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Raised when a verification command ran but its tolerance was exceeded.
class CheckFailed : public Error {
 public:
  explicit CheckFailed(const std::string& what) : Error("check-failed", what) {}
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path.string());
  f << text;
  if (!f) throw IoError("write failed for " + path.string());
}

train::RunConfig resolve_config(const std::string& path, const std::vector<std::string>& overrides,
                                const std::string& data) {
  train::RunConfig c = path.empty() ? train::RunConfig{} : train::load_run_config(path);
  for (const auto& o : overrides) train::apply_override(c, o);
  if (!data.empty()) c.data = data;
  if (c.data.empty()) throw ConfigError("no dataset given: set \"data\" in the run config or pass --data");
  return c;
}

// ---- synth --------------------------------------------------------------

struct SynthArgs {
  synth::DatasetOptions options;
  std::string out;
};

void synth(const SynthArgs& a, std::ostream& out) {
  a.options.validate();
  const auto records = synth::generate_dataset(a.options);
  synth::write_dataset(a.out, records);
  const auto baseline = synth::variance_baseline(records);
  out << "wrote " << records.size() << " records to " << a.out << " (variance baseline " << sci(baseline.variance)
      << ", sidecar " << synth::baseline_path(a.out).string() << ")\n";
}

// ---- preprocess ---------------------------------------------------------

struct PreprocessArgs {
  std::string raw, e0_list, structure, out;
  double e0 = 0.0;
  bool has_e0 = false;
};

graph::Structure read_structure(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open structure " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw IoError("malformed structure " + path.string() + ": " + e.what());
  }
  if (!j.is_object()) throw IoError("structure " + path.string() + " must be a JSON object");
  j["spectrum"] = json::array();
  j["e0"] = 0.0;
  try {
    return graph::parse_record(j.dump()).structure;
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

graph::Record preprocess_one(const fs::path& spectrum, const fs::path& structure, double e0) {
  graph::Record r;
  r.structure = read_structure(structure);
  r.spectrum = spectra::normalize_edge_step(spectra::read_two_column(spectrum.string(), e0));
  r.e0 = e0;
  return r;
}

void preprocess(const PreprocessArgs& a, std::ostream& out) {
  std::vector<graph::Record> records;
  if (fs::is_directory(a.raw)) {
    if (a.e0_list.empty()) throw ConfigError("--raw is a directory, so --e0-list is required");
    std::ifstream list(a.e0_list);
    if (!list) throw IoError("cannot open " + a.e0_list);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(list, line)) {
      ++lineno;
      std::istringstream row(line);
      std::string name;
      double e0 = 0.0;
      if (!(row >> name) || name[0] == '#') continue;
      if (!(row >> e0)) throw IoError(a.e0_list + ":" + std::to_string(lineno) + ": expected '<name> <e0 eV>'");
      const fs::path base = fs::path(a.raw) / name;
      records.push_back(preprocess_one(base.string() + ".dat", base.string() + ".json", e0));
    }
    if (records.empty()) throw ValueError(a.e0_list + " lists no spectra");
  } else {
    if (!a.has_e0) throw ConfigError("--raw is a file, so --e0 is required");
    if (a.structure.empty()) throw ConfigError("--raw is a file, so --structure is required");
    records.push_back(preprocess_one(a.raw, a.structure, a.e0));
  }
  graph::write_jsonl(a.out, records);
  out << "wrote " << records.size() << " normalized records to " << a.out << "\n";
}

// ---- train --------------------------------------------------------------

struct TrainArgs {
  std::string config, out, data;
  std::vector<std::string> overrides;
  bool quiet = false;
  bool print_config = false;
};

json terms_json(const objective::LossTerms& t) {
  return {{"loss_spec", t.spec}, {"loss_grad", t.grad}, {"loss_curv", t.curv}, {"loss_e0", t.e0}};
}

train::TrainResult train_to(const train::RunConfig& c, const std::vector<graph::Record>& records, const fs::path& dir,
                            bool quiet, std::ostream& out) {
  train::TrainOptions opts;
  opts.out = dir;
  if (!quiet) {
    opts.on_epoch = [&out](const train::EpochMetrics& t, const train::EpochMetrics& v) {
      out << "epoch " << t.epoch << "  train " << sci(t.loss_total) << "  val " << sci(v.loss_total) << "  lr "
          << sci(t.lr) << "\n";
    };
  }
  auto r = train::train_run(c, records, opts);
  json summary{{"epochs_run", r.epochs_run}, {"best_epoch", r.best_epoch}, {"best_val", r.best_val},
               {"val", terms_json(r.val)},   {"test", terms_json(r.test)},   {"seed", c.train.seed},
               {"split", {{"train", r.split.train}, {"val", r.split.val}, {"test", r.split.test}}}};
  write_text(dir / "config.json", train::to_json(c).dump(2) + "\n");
  write_text(dir / "result.json", summary.dump(2) + "\n");
  return r;
}

void train_cmd(const TrainArgs& a, std::ostream& out) {
  if (a.print_config) {
    train::RunConfig c = a.config.empty() ? train::RunConfig{} : train::load_run_config(a.config);
    for (const auto& o : a.overrides) train::apply_override(c, o);
    if (!a.data.empty()) c.data = a.data;
    out << train::to_json(c).dump(2) << "\n";
    return;
  }
  if (a.out.empty()) throw ConfigError("--out is required");
  const auto c = resolve_config(a.config, a.overrides, a.data);
  const auto records = graph::read_jsonl(c.data);
  const auto r = train_to(c, records, a.out, a.quiet, out);
  out << train::table_report({{"test", r.test}});
  out << "best epoch " << r.best_epoch << " of " << r.epochs_run << "; checkpoint " << (fs::path(a.out) / "best").string()
      << "\n";
}

// ---- predict / eval -----------------------------------------------------

struct PredictArgs {
  std::string ckpt, in, out;
  std::size_t batch_size = 16;
};

void predict(const PredictArgs& a, std::ostream& out) {
  if (a.batch_size == 0) throw ConfigError("--batch-size must be positive");
  auto ck = model::load_checkpoint(a.ckpt);
  const auto records = graph::read_jsonl(a.in);
  std::ofstream f(a.out, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + a.out);
  const std::size_t n = ck.model->config().grid.n;
  ad::NoGradGuard guard;
  for (std::size_t b = 0; b < records.size(); b += a.batch_size) {
    std::vector<graph::AtomicGraph> graphs;
    for (std::size_t i = b; i < std::min(records.size(), b + a.batch_size); ++i) {
      graphs.push_back(ck.model->prepare(records[i].structure, records[i].absorber()));
    }
    const auto res = ck.model->forward(graph::make_batch(graphs));
    for (std::size_t g = 0; g < graphs.size(); ++g) {
      const auto s = res.spectrum.data();
      json row{{"index", b + g},
               {"spectrum", std::vector<double>(s.begin() + static_cast<std::ptrdiff_t>(g * n),
                                                s.begin() + static_cast<std::ptrdiff_t>((g + 1) * n))},
               {"e0", ck.e0.inverse(res.e0[g])}};
      f << row.dump() << '\n';
    }
  }
  if (!f) throw IoError("write failed for " + a.out);
  out << "wrote " << records.size() << " predictions to " << a.out << "\n";
}

struct EvalArgs {
  std::string ckpt, in;
  std::size_t batch_size = 16;
};

void eval(const EvalArgs& a, std::ostream& out) {
  if (a.batch_size == 0) throw ConfigError("--batch-size must be positive");
  auto ck = model::load_checkpoint(a.ckpt);
  const auto records = graph::read_jsonl(a.in);
  if (records.empty()) throw ValueError(a.in + " holds no records");
  const auto data = train::prepare(*ck.model, records);
  std::vector<std::size_t> all(records.size());
  for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
  const auto t = train::evaluate(*ck.model, data, all, ck.e0, a.batch_size);
  out << train::table_report({{fs::path(a.in).filename().string(), t}});
}

// ---- verification -------------------------------------------------------

struct EquivarianceArgs {
  std::string ckpt, config;
  bool random = false;
  std::size_t trials = 20, structures = 5;
  std::uint64_t seed = 0;
  double tol = 1e-6;
};

void check_equivariance(const EquivarianceArgs& a, std::ostream& out) {
  std::unique_ptr<model::Model> m;
  if (a.random) {
    model::ModelConfig mc;
    if (!a.config.empty()) mc = train::load_run_config(a.config).model;
    m = std::make_unique<model::Model>(mc, a.seed);
    verify::perturb_parameters(*m, 0.2, a.seed + 1);
  } else {
    m = std::move(model::load_checkpoint(a.ckpt).model);
  }
  const auto report =
      verify::spectrum_invariance(*m, verify::sample_structures(a.structures, a.seed + 2), a.trials, a.seed + 3);
  out << "max deviation " << sci(report.max_deviation) << " over " << report.structures << " structures x "
      << a.trials << " rigid motions (tolerance " << sci(a.tol) << ")\n";
  if (!(report.max_deviation < a.tol)) throw CheckFailed("invariance deviation " + sci(report.max_deviation) + " exceeds " + sci(a.tol));
}

struct GradcheckArgs {
  bool tiny = false;
  std::uint64_t seed = 0;
  double tol = 1e-5;
};

void gradcheck(const GradcheckArgs& a, std::ostream& out) {
  if (!a.tiny) throw ConfigError("only the tiny configuration is supported; pass --tiny");
  const auto r = verify::tiny_gradcheck(a.seed);
  out << "max relative error " << sci(r.max_rel_error) << " over " << r.checked << " parameters (worst "
      << r.worst_param << "[" << r.worst_index << "], analytic " << sci(r.analytic) << ", numeric " << sci(r.numeric)
      << "; tolerance " << sci(a.tol) << ")\n"
      << "max absolute error " << sci(r.max_abs_error) << " against a largest gradient of " << sci(r.max_abs_grad)
      << "\n";
  if (!(r.max_rel_error < a.tol)) throw CheckFailed("gradient error " + sci(r.max_rel_error) + " exceeds " + sci(a.tol));
}

// ---- ablate -------------------------------------------------------------

struct AblateArgs {
  std::string config, out, data;
  std::vector<std::string> which, overrides;
  bool quiet = false;
};

void ablate(const AblateArgs& a, std::ostream& out) {
  const auto base = resolve_config(a.config, a.overrides, a.data);
  std::vector<std::string> runs{"baseline"};
  for (const auto& w : a.which) {
    if (w == "all") {
      for (const auto& n : train::ablation_names()) runs.push_back(n);
    } else {
      runs.push_back(w);
    }
  }
  std::vector<std::string> unique;
  for (const auto& r : runs)
    if (std::find(unique.begin(), unique.end(), r) == unique.end()) unique.push_back(r);

  // Validate every toggle before spending time on training.
  std::vector<train::RunConfig> configs;
  for (const auto& name : unique) {
    auto c = base;
    train::apply_ablation(c, name);
    configs.push_back(c);
  }
  const auto records = graph::read_jsonl(base.data);
  std::vector<std::pair<std::string, objective::LossTerms>> rows;
  for (std::size_t i = 0; i < unique.size(); ++i) {
    if (!a.quiet) out << "== " << unique[i] << "\n";
    const auto r = train_to(configs[i], records, fs::path(a.out) / unique[i], a.quiet, out);
    rows.emplace_back(unique[i], r.test);
  }
  const auto table = train::table_report(rows);
  write_text(fs::path(a.out) / "ablation.txt", table);
  out << table;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"XANES spectrum prediction with an E(3)-equivariant graph network", "xane3"};
  app.require_subcommand(1);

  SynthArgs sa;
  auto* s = app.add_subcommand("synth", "Generate a synthetic Fe-O dataset and its variance-baseline sidecar");
  s->add_option("--n", sa.options.n, "Number of records")->capture_default_str();
  s->add_option("--seed", sa.options.seed, "Generator seed")->capture_default_str();
  s->add_option("--spinel-fraction", sa.options.spinel_fraction, "Fraction of spinel-like structures")->capture_default_str();
  s->add_option("--slab-fraction", sa.options.slab_fraction, "Fraction of rocksalt structures built as slabs")->capture_default_str();
  s->add_option("--rattle-min", sa.options.rattle_min, "Smallest rattle sigma in A")->capture_default_str();
  s->add_option("--rattle-max", sa.options.rattle_max, "Largest rattle sigma in A")->capture_default_str();
  s->add_option("--out", sa.out, "Output JSON Lines file")->required();

  PreprocessArgs pa;
  auto* p = app.add_subcommand("preprocess", "Normalize raw two-column spectra into dataset records");
  p->add_option("--raw", pa.raw, "Directory of <name>.dat and <name>.json pairs, or one .dat file")->required();
  p->add_option("--e0-list", pa.e0_list, "Lines of '<name> <e0 eV>' for a raw directory");
  auto* e0_opt = p->add_option("--e0", pa.e0, "Edge energy in eV for a single raw file");
  p->add_option("--structure", pa.structure, "Structure JSON for a single raw file");
  p->add_option("--out", pa.out, "Output JSON Lines file")->required();

  TrainArgs ta;
  auto* t = app.add_subcommand("train", "Train a model and write the best checkpoint and metrics");
  t->add_option("--config", ta.config, "Run config JSON");
  t->add_option("--data", ta.data, "Dataset, overriding the config's data entry");
  t->add_option("--set", ta.overrides, "Override a config entry as dotted.key=value");
  t->add_option("--out", ta.out, "Output directory");
  t->add_flag("--quiet", ta.quiet, "Skip per-epoch lines");
  t->add_flag("--print-config", ta.print_config, "Print the resolved run config as JSON and exit");

  PredictArgs pr;
  auto* pd = app.add_subcommand("predict", "Predict spectra and edge energies for dataset records");
  pd->add_option("--ckpt", pr.ckpt, "Checkpoint directory")->required();
  pd->add_option("--in", pr.in, "Input JSON Lines dataset")->required();
  pd->add_option("--out", pr.out, "Output JSON Lines predictions")->required();
  pd->add_option("--batch-size", pr.batch_size, "Graphs per forward pass")->capture_default_str();

  EvalArgs ea;
  auto* ev = app.add_subcommand("eval", "Report per-term losses of a checkpoint on a dataset (x1e-3)");
  ev->add_option("--ckpt", ea.ckpt, "Checkpoint directory")->required();
  ev->add_option("--in", ea.in, "Input JSON Lines dataset")->required();
  ev->add_option("--batch-size", ea.batch_size, "Graphs per forward pass")->capture_default_str();

  EquivarianceArgs qa;
  auto* eq = app.add_subcommand("check-equivariance", "Check spectrum invariance under random rigid motions");
  auto* ck_opt = eq->add_option("--ckpt", qa.ckpt, "Checkpoint directory");
  auto* rnd_opt = eq->add_flag("--random", qa.random, "Use a freshly initialised model with perturbed weights");
  ck_opt->excludes(rnd_opt);
  eq->add_option("--config", qa.config, "Run config whose model section shapes the random model")->needs(rnd_opt);
  eq->add_option("--trials", qa.trials, "Rigid motions per structure")->capture_default_str();
  eq->add_option("--structures", qa.structures, "Random synthetic structures")->capture_default_str();
  eq->add_option("--seed", qa.seed, "Seed for the model, structures and motions")->capture_default_str();
  eq->add_option("--tol", qa.tol, "Largest accepted deviation")->capture_default_str();

  GradcheckArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gc->add_flag("--tiny", ga.tiny, "Use the tiny configuration on one graph");
  gc->add_option("--seed", ga.seed, "Seed for weights, structure and targets")->capture_default_str();
  gc->add_option("--tol", ga.tol, "Largest accepted relative error")->capture_default_str();

  AblateArgs aa;
  auto* ab = app.add_subcommand("ablate", "Train the baseline and toggled variants and compare them");
  ab->add_option("--which", aa.which, "Toggle to compare against the baseline, or 'all'")->required();
  ab->add_option("--config", aa.config, "Run config JSON");
  ab->add_option("--data", aa.data, "Dataset, overriding the config's data entry");
  ab->add_option("--set", aa.overrides, "Override a config entry as dotted.key=value");
  ab->add_option("--out", aa.out, "Output directory")->required();
  ab->add_flag("--quiet", aa.quiet, "Skip per-epoch lines");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: usage: " << one_line(e.what()) << "\n";
    return kExitInvalid;
  }

  try {
    if (s->parsed()) {
      synth(sa, out);
    } else if (p->parsed()) {
      pa.has_e0 = e0_opt->count() > 0;
      preprocess(pa, out);
    } else if (t->parsed()) {
      train_cmd(ta, out);
    } else if (pd->parsed()) {
      predict(pr, out);
    } else if (ev->parsed()) {
      eval(ea, out);
    } else if (eq->parsed()) {
      if (!qa.random && qa.ckpt.empty()) throw ConfigError("pass --ckpt <dir> or --random");
      check_equivariance(qa, out);
    } else if (gc->parsed()) {
      gradcheck(ga, out);
    } else if (ab->parsed()) {
      ablate(aa, out);
    }
  } catch (const CheckFailed& e) {
    err << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return kExitCheckFailed;
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << one_line(e.what()) << "\n";
    return kExitInvalid;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << "\n";
    return kExitInvalid;
  }
  return kExitOk;
}

int run(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  return run(args, std::cout, std::cerr);
}

}  // namespace xane3::cli
