#pragma once

// Command-line front end: synth, train, score, eval, ablate, report.
// Exit codes: 0 ok, 2 configuration/usage, 3 I/O or ingest, 4 numeric abort.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <iostream>
#include <string>
#include <vector>

#include "ddl/ddl.hpp"

namespace ddl::cli {

enum ExitCode : int { kOk = 0, kFailure = 1, kConfig = 2, kIo = 3, kNumeric = 4 };

template <typename F>
int guarded(F&& body) {
  try {
    body();
    return kOk;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const ContractError& e) {
    std::cerr << "invalid argument: " << e.what() << '\n';
    return kConfig;
  } catch (const IngestError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return kIo;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const NumericError& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailure;
  }
}

inline RunConfig config_or_default(const std::string& path) { return path.empty() ? RunConfig{} : load_run_config(path); }

inline bool parse_switch(const std::string& s) {
  if (s == "on" || s == "true" || s == "1") return true;
  if (s == "off" || s == "false" || s == "0") return false;
  throw ConfigError("expected on or off, got '" + s + "'");
}

// Trains, scores the test split and evaluates one configuration.
inline double train_score_eval(RunConfig rc, const std::filesystem::path& run_dir, bool verbose) {
  rc.train.out = run_dir.string();
  const FitResult fr = fit(rc, [&](std::uint64_t e, double recon, double sigma) {
    if (verbose)
      std::cerr << "  [" << run_dir.filename().string() << "] epoch " << e << " recon " << fmt_num(recon, 5)
                << " sigma " << fmt_num(sigma, 6) << '\n';
  });
  const auto manifest = load_manifest(rc.train.data);
  const auto ck = load_checkpoint<float>(fr.final_checkpoint);
  score_dataset(ck.model, manifest, run_dir / "scores", rc.score, fr.final_checkpoint);
  const EvalResult ev = evaluate(run_dir / "scores", manifest);
  write_text(run_dir / "scores" / "eval.json", to_json_value(ev).dump(2) + "\n");
  return ev.dataset_auc;
}

inline std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(tok, &used));
      if (used != tok.size()) throw std::invalid_argument(tok);
    } catch (const std::exception&) {
      throw ConfigError("bad seed '" + tok + "' in --seeds");
    }
  }
  if (out.empty()) throw ConfigError("--seeds is empty");
  return out;
}

inline double median_of(std::vector<double> v) { return aggregate_scene_auc(std::move(v)); }

inline int run(int argc, char** argv) {
  CLI::App app{"Distinction-learning video anomaly detection (desk scale)"};
  app.require_subcommand(1);

  // synth
  std::string s_config, s_out;
  std::uint64_t s_seed = 7;
  auto* synth = app.add_subcommand("synth", "Generate the synthetic video corpus");
  synth->add_option("--config", s_config, "Run config file (uses its synth section)");
  synth->add_option("--out", s_out, "Dataset root")->required();
  synth->add_option("--seed", s_seed, "Generator seed");

  // train
  std::string t_config, t_mode, t_data, t_out;
  std::optional<std::uint64_t> t_seed;
  std::optional<std::size_t> t_epochs;
  auto* train = app.add_subcommand("train", "Train a reconstruction model");
  train->add_option("--config", t_config, "Run config file");
  train->add_option("--mode", t_mode, "ddl, sdl or none (overrides the config)");
  train->add_option("--data", t_data, "Dataset root or manifest (overrides the config)");
  train->add_option("--out", t_out, "Run output directory (overrides the config)");
  train->add_option("--seed", t_seed, "Training seed (overrides the config)");
  train->add_option("--epochs", t_epochs, "Epoch count (overrides the config)");

  // score
  std::string c_config, c_ckpt, c_data, c_out, c_normalize;
  std::optional<std::size_t> c_patch, c_median, c_batch;
  auto* score = app.add_subcommand("score", "Score every test video with a trained checkpoint");
  score->add_option("--config", c_config, "Run config file (score section)");
  score->add_option("--checkpoint", c_ckpt, "Checkpoint file")->required();
  score->add_option("--data", c_data, "Dataset root or manifest")->required();
  score->add_option("--out", c_out, "Scores output directory")->required();
  score->add_option("--patch", c_patch, "Patch size for frame scores (default 16)");
  score->add_option("--median", c_median, "Median filter window, odd (default 17)");
  score->add_option("--normalize", c_normalize, "Per-video min-max normalization: on or off (default on)");
  score->add_option("--batch", c_batch, "Inference batch size");

  // eval
  std::string e_scores, e_data, e_scene, e_out;
  auto* eval = app.add_subcommand("eval", "Compute frame-level ROC-AUC from score files");
  eval->add_option("--scores", e_scores, "Scores directory")->required();
  eval->add_option("--data", e_data, "Dataset root or manifest")->required();
  eval->add_option("--scene-map", e_scene, "JSON file {scene: [video ids]}");
  eval->add_option("--out", e_out, "Output file (default <scores>/eval.json)");

  // ablate
  std::string a_config, a_data, a_out, a_seeds = "7", a_variants = "UNET_BASELINE,C3DSU";
  auto* ablate = app.add_subcommand("ablate", "Train and evaluate every mode for both architectures");
  ablate->add_option("--config", a_config, "Run config file");
  ablate->add_option("--data", a_data, "Dataset root; omitted means one synthetic corpus per seed");
  ablate->add_option("--out", a_out, "Output directory")->required();
  ablate->add_option("--seeds", a_seeds, "Comma-separated seeds; cells hold the median AUC over seeds");
  ablate->add_option("--variants", a_variants, "Comma-separated model variants");

  // report
  std::string r_run, r_out;
  std::size_t r_frames = 1;
  auto* report = app.add_subcommand("report", "Emit reconstruction panels, the sigma plot and a summary");
  report->add_option("--run", r_run, "Run directory")->required();
  report->add_option("--out", r_out, "Report output directory")->required();
  report->add_option("--frames", r_frames, "Panels per test video");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  if (*synth) {
    return guarded([&] {
      const RunConfig rc = config_or_default(s_config);
      const auto m = synth_dataset(rc.synth, s_seed, s_out);
      std::cout << (m.root / "manifest.json").string() << '\n';
    });
  }

  if (*train) {
    return guarded([&] {
      RunConfig rc = config_or_default(t_config);
      if (!t_mode.empty()) rc.train.mode = parse_mode(t_mode);
      if (!t_data.empty()) rc.train.data = t_data;
      if (!t_out.empty()) rc.train.out = t_out;
      if (t_seed) rc.train.seed = *t_seed;
      if (t_epochs) rc.train.epochs = *t_epochs;
      if (rc.train.data.empty()) throw ConfigError("no dataset given (--data or train.data)");
      if (rc.train.out.empty()) throw ConfigError("no output directory given (--out or train.out)");
      const FitResult r = fit(rc, [](std::uint64_t e, double recon, double sigma) {
        std::cerr << "epoch " << e << " recon " << fmt_num(recon, 6) << " sigma " << fmt_num(sigma, 8) << '\n';
      });
      std::cout << r.final_checkpoint.string() << '\n';
    });
  }

  if (*score) {
    return guarded([&] {
      ScoreConfig sc = config_or_default(c_config).score;
      if (c_patch) sc.patch = *c_patch;
      if (c_median) sc.median = *c_median;
      if (c_batch) sc.batch = *c_batch;
      if (!c_normalize.empty()) sc.normalize = parse_switch(c_normalize);
      sc.validate();
      const auto ck = load_checkpoint<float>(c_ckpt);
      const auto manifest = load_manifest(c_data);
      const auto res = score_dataset(ck.model, manifest, c_out, sc, c_ckpt);
      std::cout << "scored " << res.size() << " videos into " << c_out << '\n';
    });
  }

  if (*eval) {
    return guarded([&] {
      const auto manifest = load_manifest(e_data);
      std::optional<SceneMap> scenes;
      if (!e_scene.empty()) scenes = load_scene_map(e_scene);
      const EvalResult r = evaluate(e_scores, manifest, scenes);
      for (const auto& id : r.skipped) std::cerr << "warning: skipped single-class " << id << '\n';
      const std::filesystem::path out = e_out.empty() ? std::filesystem::path(e_scores) / "eval.json" : std::filesystem::path(e_out);
      write_text(out, to_json_value(r).dump(2) + "\n");
      std::cout << "dataset_auc " << fmt_num(r.dataset_auc, 6);
      if (r.scene_median) std::cout << " scene_median_auc " << fmt_num(*r.scene_median, 6);
      std::cout << '\n';
    });
  }

  if (*ablate) {
    return guarded([&] {
      const RunConfig base = config_or_default(a_config);
      const auto seeds = parse_seeds(a_seeds);
      std::vector<ModelVariant> variants;
      {
        std::stringstream ss(a_variants);
        std::string tok;
        while (std::getline(ss, tok, ',')) variants.push_back(parse_variant(tok));
      }
      const std::vector<TrainMode> modes{TrainMode::kNone, TrainMode::kSDL, TrainMode::kDDL};
      const std::filesystem::path out(a_out);
      std::filesystem::create_directories(out);
      std::map<std::pair<int, int>, std::vector<double>> cells;
      std::ostringstream runs;
      runs << "model,mode,seed,auc\n";
      for (const auto seed : seeds) {
        std::string data = a_data;
        if (data.empty()) {
          data = (out / ("data_s" + std::to_string(seed))).string();
          synth_dataset(base.synth, seed, data);
        }
        for (std::size_t v = 0; v < variants.size(); ++v)
          for (std::size_t k = 0; k < modes.size(); ++k) {
            RunConfig rc = base;
            rc.train.data = data;
            rc.train.seed = seed;
            rc.train.model_seed_explicit = false;
            rc.train.mode = modes[k];
            rc.train.model.variant = variants[v];
            rc.train.model.frames = rc.train.model_frames();
            const auto dir = out / (to_string(variants[v]) + "_" + to_string(modes[k]) + "_s" + std::to_string(seed));
            const double auc = train_score_eval(rc, dir, true);
            cells[{static_cast<int>(v), static_cast<int>(k)}].push_back(auc);
            runs << to_string(variants[v]) << ',' << to_string(modes[k]) << ',' << seed << ',' << fmt_num(auc, 6) << '\n';
            std::cerr << to_string(variants[v]) << ' ' << to_string(modes[k]) << " seed " << seed << " auc "
                      << fmt_num(auc, 6) << '\n';
          }
      }
      std::ostringstream table;
      table << "model,without DDL,with SDL,with DDL\n";
      for (std::size_t v = 0; v < variants.size(); ++v) {
        table << to_string(variants[v]);
        for (std::size_t k = 0; k < modes.size(); ++k)
          table << ',' << fmt_num(median_of(cells[{static_cast<int>(v), static_cast<int>(k)}]), 6);
        table << '\n';
      }
      write_text(out / "ablation_runs.csv", runs.str());
      write_text(out / "ablation_table.csv", table.str());
      std::cout << table.str();
    });
  }

  if (*report) {
    return guarded([&] {
      ReportOptions opt;
      opt.frames_per_video = r_frames;
      const auto res = write_report(r_run, r_out, opt);
      std::cout << "wrote " << res.panels.size() << " panels" << (res.sigma_plot ? " and sigma_trace.png" : "")
                << " to " << r_out << '\n';
    });
  }
  return kConfig;
}

}  // namespace ddl::cli
