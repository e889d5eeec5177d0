// vbiopsy: command line front end over a storage root.
#include <CLI11.hpp>

#include <chrono>
#include <iostream>
#include <optional>

#include "vbiopsy/orchestration/config.hpp"
#include "vbiopsy/orchestration/grid.hpp"
#include "vbiopsy/orchestration/pipeline.hpp"
#include "vbiopsy/orchestration/service.hpp"
#include "vbiopsy/orchestration/storage.hpp"
#include "vbiopsy/orchestration/trial.hpp"

namespace orch = vbiopsy::orchestration;
using nlohmann::json;

namespace {

struct Globals {
  std::string config_path;
  std::string root;
  std::vector<std::string> sets;
};

orch::PipelineConfig resolve(const Globals& g) {
  json j = g.config_path.empty() ? json{{"preset", "desk"}} : orch::read_json(g.config_path);
  if (!g.root.empty()) j["storage_root"] = g.root;
  auto cfg = orch::pipeline_config_from_json(j);
  if (g.sets.empty()) return cfg;
  // --set key=value edits the effective config; value is JSON or a bare string
  json overrides = json::object();
  for (const auto& s : g.sets) {
    const auto eq = s.find('=');
    vbiopsy::require(eq != std::string::npos && eq > 0, vbiopsy::ErrorCode::InvalidArgument,
                     "--set expects key=value, got '" + s + "'");
    const auto value = s.substr(eq + 1);
    overrides[s.substr(0, eq)] = json::accept(value) ? json::parse(value) : json(value);
  }
  return orch::pipeline_config_from_json(orch::apply_overrides(orch::to_json(cfg), overrides));
}

int exit_code(vbiopsy::ErrorCode c) {
  switch (c) {
    case vbiopsy::ErrorCode::InvalidArgument: return 2;
    case vbiopsy::ErrorCode::MissingPrerequisite: return 3;
    case vbiopsy::ErrorCode::NotFound: return 4;
    case vbiopsy::ErrorCode::Conflict: return 5;
    case vbiopsy::ErrorCode::Unprocessable: return 6;
    case vbiopsy::ErrorCode::IntegrityMismatch: return 7;
    default: return 1;
  }
}

/// Runs a command body and writes its run record whether it succeeds or not.
int run(const std::string& command, const Globals& g, json inputs,
        const std::function<json(const orch::PipelineConfig&)>& body) {
  const auto t0 = std::chrono::steady_clock::now();
  orch::RunRecord rec;
  rec.command = command;
  rec.started = orch::iso8601(orch::system_clock()());
  std::optional<orch::PipelineConfig> cfg;
  int code = 0;
  try {
    cfg = resolve(g);
    inputs["config"] = orch::to_json(*cfg);
    rec.config_hash = orch::config_hash(inputs["config"]);
    rec.inputs = inputs;
    rec.outputs = body(*cfg);
    std::cout << rec.outputs.dump(2) << "\n";
  } catch (const vbiopsy::Error& e) {
    rec.status = "failed";
    rec.error = std::string(vbiopsy::to_string(e.code())) + ": " + e.what();
    std::cerr << "error [" << vbiopsy::to_string(e.code()) << "]: " << e.what() << "\n";
    code = exit_code(e.code());
  } catch (const std::exception& e) {
    rec.status = "failed";
    rec.error = e.what();
    std::cerr << "error: " << e.what() << "\n";
    code = 1;
  }
  rec.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (cfg && std::filesystem::exists(cfg->storage_root)) {
    const auto dir = orch::write_run_record(cfg->storage_root, rec, orch::system_clock()());
    std::cerr << "run record: " << (dir / "run.json").string() << "\n";
  }
  return code;
}

json metrics_json(const vbiopsy::metrics::MetricsReport& r) { return vbiopsy::metrics::to_json(r); }

std::vector<double> parse_alphas(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(item, &used);
    } catch (...) {
      used = 0;
    }
    vbiopsy::require(used == item.size() && !item.empty(), vbiopsy::ErrorCode::InvalidArgument,
                     "bad alpha value '" + item + "'");
    out.push_back(v);
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Virtual biopsy pipeline over synthetic prostate phantoms"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("-c,--config", g.config_path, "pipeline config JSON (default: desk preset)")->check(CLI::ExistingFile);
  app.add_option("-r,--root", g.root, "storage root, overrides the config");
  app.add_option("--set", g.sets, "config override key=value, dotted keys allowed")->take_all();

  int code = 0;

  auto* gen = app.add_subcommand("phantom-gen", "generate the synthetic cohort and split manifest");
  std::optional<std::size_t> n;
  std::optional<std::uint64_t> seed;
  gen->add_option("--n", n, "number of cases");
  gen->add_option("--seed", seed, "cohort seed");
  gen->callback([&] {
    if (n) g.sets.push_back("cohort.count=" + std::to_string(*n));
    if (seed) g.sets.push_back("cohort.seed=" + std::to_string(*seed));
    code = run("phantom-gen", g, {}, [](const orch::PipelineConfig& cfg) {
      const auto r = orch::phantom_gen(cfg);
      return json{{"cases", r.cases}, {"high_risk", r.high_risk}, {"checksum", orch::dataset_checksum(cfg)},
                  {"data", orch::layout(cfg).data().string()}};
    });
  });

  auto* seg = app.add_subcommand("train-seg", "train the gland segmenter and report held-out DSC");
  seg->callback([&] {
    code = run("train-seg", g, {}, [](const orch::PipelineConfig& cfg) {
      const auto r = orch::train_seg(cfg);
      return json{{"best_epoch", r.best_epoch}, {"val_dice", r.val_dice}, {"test_dice", r.test_dice},
                  {"per_case_dice", r.per_case_dice}, {"model", orch::layout(cfg).segmenter().string()}};
    });
  });

  auto* pre = app.add_subcommand("preprocess", "write classifier patches for every case and scale");
  pre->callback([&] {
    code = run("preprocess", g, {}, [](const orch::PipelineConfig& cfg) {
      return json{{"patches", orch::preprocess(cfg)}};
    });
  });

  auto* clf = app.add_subcommand("train-clf", "train one classifier per patch scale and store ensemble predictions");
  clf->callback([&] {
    code = run("train-clf", g, {}, [](const orch::PipelineConfig& cfg) {
      json scales = json::array();
      for (const auto& s : orch::train_clf(cfg))
        scales.push_back({{"scale", s.scale_tag}, {"best_epoch", s.best_epoch},
                          {"val_auc", s.val_auc ? json(*s.val_auc) : json(nullptr)}});
      return json{{"scales", scales}, {"model_tag", cfg.classifier.model_tag()}};
    });
  });

  auto* ev = app.add_subcommand("evaluate", "metrics of stored ensemble predictions");
  std::string split = "test";
  ev->add_option("--split", split, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->callback([&] {
    code = run("evaluate", g, {{"split", split}}, [&](const orch::PipelineConfig& cfg) {
      return metrics_json(orch::evaluate(cfg, split));
    });
  });

  auto* vae = app.add_subcommand("train-vaegan", "train the VAE-GAN on image patches of the explained scale");
  vae->callback([&] {
    code = run("train-vaegan", g, {}, [](const orch::PipelineConfig& cfg) {
      const auto r = orch::train_vaegan_cmd(cfg);
      return json{{"best_epoch", r.best_epoch}, {"initial_val_l1", r.initial_val_l1}, {"final_val_l1", r.final_val_l1}};
    });
  });

  auto* cf = app.add_subcommand("counterfactual", "latent-shift counterfactuals and heatmaps for one case");
  std::string case_id, alphas;
  cf->add_option("--case", case_id, "case id")->required();
  cf->add_option("--alphas", alphas, "comma separated alpha schedule");
  cf->callback([&] {
    code = run("counterfactual", g, {{"case", case_id}, {"alphas", alphas}}, [&](const orch::PipelineConfig& cfg) {
      std::optional<std::vector<double>> a;
      if (!alphas.empty()) a = parse_alphas(alphas);
      const auto r = orch::run_counterfactual(cfg, case_id, a);
      auto out = vbiopsy::counterfactual::trace_json(r.job);
      out["job_id"] = r.job_id;
      out["dir"] = r.dir.string();
      return out;
    });
  });

  auto* fid = app.add_subcommand("fidelity", "reconstruction fidelity histogram for a split");
  std::string fid_split = "test";
  fid->add_option("--split", fid_split)->check(CLI::IsMember({"train", "val", "test"}));
  fid->callback([&] {
    code = run("fidelity", g, {{"split", fid_split}}, [&](const orch::PipelineConfig& cfg) {
      return vbiopsy::counterfactual::to_json(orch::fidelity(cfg, fid_split));
    });
  });

  auto* init = app.add_subcommand("trial-init", "create a reader trial over a split");
  std::string trial_id, trial_split = "test";
  std::vector<std::string> readers;
  init->add_option("--trial", trial_id)->required();
  init->add_option("--reader", readers, "reader_id:band with band <5y, 5-10y or >10y")->required();
  init->add_option("--split", trial_split)->check(CLI::IsMember({"train", "val", "test"}));
  init->callback([&] {
    code = run("trial-init", g, {{"trial", trial_id}, {"readers", readers}, {"split", trial_split}},
               [&](const orch::PipelineConfig& cfg) {
                 orch::TrialDefinition d;
                 d.trial_id = trial_id;
                 d.cases = orch::load_split_manifest(cfg).split(trial_split);
                 const auto truth = orch::truth_labels(cfg);
                 for (const auto& c : d.cases) d.truth[c] = truth.at(c);
                 for (const auto& [id, p] : orch::read_predictions(cfg, trial_split)) d.ai_probability[id] = p.probability;
                 for (const auto& r : readers) {
                   const auto colon = r.find(':');
                   vbiopsy::require(colon != std::string::npos, vbiopsy::ErrorCode::InvalidArgument,
                                    "--reader expects id:band, got '" + r + "'");
                   d.readers[r.substr(0, colon)] = vbiopsy::metrics::experience_from_string(r.substr(colon + 1));
                 }
                 d.threshold = cfg.threshold;
                 d.washout_seconds = cfg.trial.washout_seconds;
                 d.max_elapsed_seconds = cfg.trial.max_elapsed_seconds;
                 orch::TrialStore(cfg.storage_root).create(d);
                 return json{{"trial", trial_id}, {"cases", d.cases.size()}, {"readers", d.readers.size()}};
               });
  });

  auto* rep = app.add_subcommand("trial-report", "aggregate finalized reader sessions");
  std::string rep_trial;
  rep->add_option("--trial", rep_trial)->required();
  rep->callback([&] {
    code = run("trial-report", g, {{"trial", rep_trial}}, [&](const orch::PipelineConfig& cfg) {
      const auto report = orch::TrialStore(cfg.storage_root).report(rep_trial);
      orch::write_json(orch::layout(cfg).trial(rep_trial) / "report.json", report);
      return report;
    });
  });

  auto* grid = app.add_subcommand("grid-search", "exhaustive search over classifier hyperparameters");
  std::string grid_path;
  grid->add_option("--grid", grid_path, "GridSpec JSON")->required()->check(CLI::ExistingFile);
  grid->callback([&] {
    code = run("grid-search", g, {{"grid", orch::read_json(grid_path)}}, [&](const orch::PipelineConfig& cfg) {
      const auto spec = orch::grid_spec_from_json(orch::read_json(grid_path));
      const auto result = orch::run_grid(spec, orch::grid_evaluator(cfg), cfg.storage_root);
      return orch::to_json(result, spec.objective);
    });
  });

  auto* serve = app.add_subcommand("serve", "HTTP service for the reader workbench");
  std::string host = "127.0.0.1";
  std::optional<int> port;
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->callback([&] {
    code = run("serve", g, {{"host", host}}, [&](const orch::PipelineConfig& base) {
      auto cfg = base;
      if (port) cfg.port = *port;
      orch::Service service(cfg);
      vbiopsy::require(service.bind(host, cfg.port), vbiopsy::ErrorCode::Io,
                       "cannot bind " + host + ":" + std::to_string(cfg.port));
      std::cerr << "listening on http://" << host << ":" << cfg.port << "\n";
      service.listen_after_bind();
      return json{{"stopped", true}};
    });
  });

  auto* show = app.add_subcommand("config", "print the effective configuration");
  show->callback([&] {
    try {
      std::cout << orch::to_json(resolve(g)).dump(2) << "\n";
    } catch (const vbiopsy::Error& e) {
      std::cerr << "error [" << vbiopsy::to_string(e.code()) << "]: " << e.what() << "\n";
      code = exit_code(e.code());
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // usage errors share the invalid-argument exit code
    return app.exit(e) == 0 ? 0 : 2;
  }
  return code;
}
