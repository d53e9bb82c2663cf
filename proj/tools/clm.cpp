// Command-line front end for the workbench.

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "clm/checkpoint.hpp"
#include "clm/corpus.hpp"
#include "clm/csv.hpp"
#include "clm/pca.hpp"
#include "clm/pretrain.hpp"
#include "clm/run_config.hpp"
#include "clm/scaling.hpp"
#include "clm/transfer.hpp"
#include "clm/transfer_metrics.hpp"
#include "clm/workbench.hpp"

namespace fs = std::filesystem;
using namespace clm;

namespace {

struct UsageError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

// Keeps a trailing ".0" on integral values so "1" reads as a real number.
std::string real(double v) {
  std::string s = format_number(v);
  if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
  return s;
}

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string run_dir;  // overrides $CLM_RUN_ROOT/<run_id>
};

struct Session {
  RunConfig config;
  fs::path dir;
  RunManifest manifest;

  Session(const Common& c, const std::string& command) {
    config = load_run_config(c.config_path, c.overrides);
    dir = c.run_dir.empty() ? run_directory(config) : fs::path(c.run_dir);
    fs::create_directories(dir);
    manifest.command = command;
    manifest.run_id = config.run_id;
    manifest.config_hash = run_config_hash(config);
    manifest.seeds = config.transfer_seeds;
    manifest.schedule = to_json(config)["schedule"];
    manifest.started = utc_now();
  }

  fs::path write(const fs::path& rel, const std::string& body) {
    fs::create_directories((dir / rel).parent_path());
    write_file_atomic(dir / rel, body);
    add_file(manifest, dir, rel);
    return dir / rel;
  }

  void checkpoint(const fs::path& rel, const Checkpoint& c, const std::string& id) {
    fs::create_directories((dir / rel).parent_path());
    save_checkpoint(c, dir / rel);
    add_file(manifest, dir, rel);
    manifest.checkpoints.push_back({id, c.meta.epoch_fraction, rel.generic_string(), c.meta.config_hash});
  }

  void finish() {
    manifest.finished = utc_now();
    append_manifest(dir, manifest);
  }
};

// Vocabulary of an explicit file, else of the configured corpus.
Vocabulary vocab_for(const std::string& path, const PreparedData& data) {
  return path.empty() ? data.corpus.vocab : Vocabulary::load(path);
}

DownstreamTask pick_task(const RunConfig& config, const std::string& task, const std::string& task_csv) {
  if (!task_csv.empty()) return load_task_csv(task_csv);
  for (const auto& t : config.tasks) {
    if (t.name == task) return load_task(t, config.seed);
  }
  if (task.empty()) throw UsageError("one of --task or --task-csv is required");
  throw UsageError("task " + task + " is not declared in the configuration");
}

Checkpoint load_or_throw(const std::string& path) {
  if (path.empty()) throw UsageError("--checkpoint is required");
  return load_checkpoint(path);
}

std::string stem(const std::string& path) { return fs::path(path).stem().string(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Chemical language model transfer workbench"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Expand all help");
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config_path, "Configuration document (JSON)")->check(CLI::ExistingFile);
    sub->add_option("-s,--set", common.overrides, "Override a configuration value, key.path=value")->take_all();
    sub->add_option("--run-dir", common.run_dir, "Output directory (default: $CLM_RUN_ROOT/<run_id>)");
  };

  std::string corpus, vocab_path, ckpt_path, task, task_csv, metrics_path, points_path, axis_name = "compute",
                                                                                   pca_dir, smiles_path;
  std::uint64_t seed = 0;
  double n_params = 0, d_tokens = 0;
  bool save_encoder = false;

  auto* ingest = app.add_subcommand("ingest", "Deduplicate, filter and split a SMILES corpus");
  add_common(ingest);
  ingest->add_option("--corpus", corpus, "Newline-delimited SMILES (default: configured corpus)");

  auto* vocab = app.add_subcommand("vocab", "Build the token vocabulary of a corpus file");
  add_common(vocab);
  vocab->add_option("--corpus", corpus, "Newline-delimited SMILES")->required();

  auto* pretrain = app.add_subcommand("pretrain", "MLM pretraining with interval checkpoints");
  add_common(pretrain);

  auto* ft = app.add_subcommand("finetune", "Fine-tune a checkpoint on a downstream task");
  auto* lp = app.add_subcommand("probe", "Linear probe on a frozen checkpoint");
  for (auto* sub : {ft, lp}) {
    add_common(sub);
    sub->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
    sub->add_option("--task", task, "Task name from the configuration");
    sub->add_option("--task-csv", task_csv, "Task CSV (smiles,split,targets...)");
    sub->add_option("--seed", seed, "Transfer seed");
    sub->add_option("--vocab", vocab_path, "Vocabulary file (default: configured corpus)");
  }
  ft->add_flag("--save-encoder", save_encoder, "Also write the fine-tuned encoder");

  auto* eval = app.add_subcommand("eval-loss", "Validation MLM loss, or zero-shot loss on other SMILES");
  add_common(eval);
  eval->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval->add_option("--smiles", smiles_path, "Score these SMILES (one per line, or a task CSV) instead of the validation set");
  eval->add_option("--vocab", vocab_path, "Vocabulary file");

  auto* trace = app.add_subcommand("trace-hessian", "Hutchinson estimate of the MLM Hessian trace");
  add_common(trace);
  trace->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  trace->add_option("--seed", seed, "Probe seed");

  auto* pgm = app.add_subcommand("pgm", "Principal-gradient distance between MLM and a task");
  add_common(pgm);
  pgm->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  pgm->add_option("--task", task, "Task name from the configuration");
  pgm->add_option("--task-csv", task_csv, "Task CSV");
  pgm->add_option("--seed", seed, "Minibatch seed");
  pgm->add_option("--vocab", vocab_path, "Vocabulary file");

  auto* cons = app.add_subcommand("consistency", "Spearman consistency from a metrics CSV");
  add_common(cons);
  cons->add_option("--metrics", metrics_path, "Metrics CSV")->required()->check(CLI::ExistingFile);
  cons->add_option("--axis", axis_name, "compute | model | data");

  auto* fit = app.add_subcommand("fit-scaling", "Fit L = E + A/N^alpha + B/D^beta");
  add_common(fit);
  fit->add_option("--points", points_path, "CSV with N, D, loss columns")->required()->check(CLI::ExistingFile);

  auto* viz = app.add_subcommand("pca-viz", "PCA of final-block parameters across checkpoints");
  add_common(viz);
  viz->add_option("--dir", pca_dir, "Directory holding checkpoints/ and finetuned/<task>/")
      ->required()
      ->check(CLI::ExistingDirectory);

  auto* budget = app.add_subcommand("compute-budget", "Training compute in FLOPs and PF-days");
  add_common(budget);
  budget->add_option("--n", n_params, "Non-embedding parameters")->required();
  budget->add_option("--d", d_tokens, "Training tokens")->required();

  auto* pipe = app.add_subcommand("pipeline", "Pretrain, transfer, metrics and analysis along one axis");
  add_common(pipe);
  pipe->add_option("--axis", axis_name, "compute | model | data");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "error: usage: %s\n", one_line(e.what()).c_str());
    return 2;
  }

  try {
    if (*ingest) {
      Session s(common, "ingest");
      if (!corpus.empty()) s.config.corpus.path = corpus;
      const auto data = prepare_data(s.config);
      s.manifest.corpus_digest = data.corpus_digest;
      s.write("corpus/train.smi", join_lines(data.corpus.train));
      s.write("corpus/validation.smi", join_lines(data.corpus.validation));
      s.write("corpus/vocab.txt", join_lines(data.corpus.vocab.tokens()));
      const auto& c = data.corpus;
      const std::string report = fmt::format(
          "lines = {}\nduplicates = {}\nunparsable = {}\ntoo_long = {}\ntrain = {}\nvalidation = {}\nvocab_size = {}\n",
          c.n_lines, c.n_duplicates, c.n_unparsable, c.n_too_long, c.train.size(), c.validation.size(), c.vocab.size());
      s.write("corpus/ingest.txt", report);
      std::cout << report;
      s.finish();
    } else if (*vocab) {
      Session s(common, "vocab");
      const auto lines = read_lines(corpus);
      const auto v = build_vocab(lines);
      s.write("vocab.txt", join_lines(v.tokens()));
      std::cout << "vocab_size = " << v.size() << "\n";
      s.finish();
    } else if (*pretrain) {
      Session s(common, "pretrain");
      const auto data = prepare_data(s.config);
      s.manifest.corpus_digest = data.corpus_digest;
      s.write("corpus/vocab.txt", join_lines(data.corpus.vocab.tokens()));
      const auto mc = model_config(s.config, s.config.model, data);
      CsvWriter log({"checkpoint_id", "step", "epoch_fraction", "tokens_seen", "l_pre"});
      auto result = train(
          mc, s.config.schedule, data.train, s.config.seed,
          [&](const Checkpoint& c) {
            const std::string id = s.config.run_id + "/" + std::to_string(c.meta.step);
            s.checkpoint(fs::path("pretrain/checkpoints") / fmt::format("step_{:08d}.ckpt", c.meta.step), c, id);
            const double l = eval_pretrain_loss(c.params, data.validation, s.config.eval_seed, s.config.schedule.masking);
            log.add({id, std::to_string(c.meta.step), format_number(c.meta.epoch_fraction),
                     std::to_string(c.meta.tokens_seen), format_number(l)});
            std::cout << id << " epoch " << format_number(c.meta.epoch_fraction) << " l_pre " << format_number(l)
                      << std::endl;
          },
          {s.config.run_id, s.config.wall_clock});
      CsvWriter steps({"step", "epoch_fraction", "train_loss", "lr"});
      for (const auto& r : result.log) {
        steps.add({std::to_string(r.step), format_number(r.epoch_fraction), format_number(r.train_loss),
                   format_number(r.lr)});
      }
      s.write("pretrain/checkpoints.csv", log.str());
      s.write("pretrain/train_log.csv", steps.str());
      s.finish();
    } else if (*ft || *lp) {
      const bool fine = ft->parsed();
      Session s(common, fine ? "finetune" : "probe");
      const auto ck = load_or_throw(ckpt_path);
      const auto data = prepare_data(s.config);
      const auto v = vocab_for(vocab_path, data);
      const auto t = pick_task(s.config, task, task_csv);
      const auto r = fine ? finetune(ck.params, v, t, seed, s.config.finetune)
                          : linear_probe(ck.params, v, t, seed, s.config.probe);
      CsvWriter w({"checkpoint", "task", "mode", "seed", "metric_name", "value", "best_epoch", "epochs_run",
                   "best_valid_loss"});
      w.add({ckpt_path, t.name, fine ? "ft" : "lp", std::to_string(seed), r.metric_name, format_number(r.metric),
             std::to_string(r.best_epoch), std::to_string(r.epochs_run), format_number(r.best_valid_loss)});
      const std::string base = fmt::format("{}/{}_{}_s{}", fine ? "finetune" : "probe", stem(ckpt_path), t.name, seed);
      s.write(base + ".csv", w.str());
      if (fine && save_encoder) {
        Checkpoint out{r.encoder, ck.meta};
        out.meta.run_id = ck.meta.run_id + "-ft-" + t.name;
        out.meta.config_hash = config_hash(r.encoder.config);
        s.checkpoint(base + ".ckpt", out, out.meta.run_id + "/" + std::to_string(out.meta.step));
      }
      std::cout << r.metric_name << " = " << format_number(r.metric) << "\n";
      s.finish();
    } else if (*eval) {
      Session s(common, "eval-loss");
      const auto ck = load_or_throw(ckpt_path);
      const auto data = prepare_data(s.config);
      double l = 0;
      std::string name;
      if (smiles_path.empty()) {
        if (!vocab_path.empty() && !(Vocabulary::load(vocab_path) == data.corpus.vocab)) {
          throw UsageError("--vocab differs from the configured corpus vocabulary; pass --smiles to score other data");
        }
        l = eval_pretrain_loss(ck.params, data.validation, s.config.eval_seed, s.config.schedule.masking);
        name = "l_pre";
      } else {
        const auto v = vocab_for(vocab_path, data);
        // A task CSV contributes its smiles column; anything else is one SMILES per line.
        const auto smiles = fs::path(smiles_path).extension() == ".csv" ? load_task_csv(smiles_path).smiles
                                                                         : read_lines(smiles_path);
        l = zero_shot_downstream_loss(ck.params, v, smiles, s.config.eval_seed,
                                      s.config.schedule.masking);
        name = "l_down";
      }
      const std::string line = name + " = " + format_number(l) + "\n";
      s.write("eval/" + stem(ckpt_path) + "_" + name + ".txt", line);
      std::cout << line;
      s.finish();
    } else if (*trace) {
      Session s(common, "trace-hessian");
      const auto ck = load_or_throw(ckpt_path);
      const auto data = prepare_data(s.config);
      HutchinsonConfig hc;
      hc.n_sequences = s.config.hutchinson_sequences;
      hc.minibatch_size = s.config.hutchinson_minibatch;
      hc.seed = seed;
      const double t = hessian_trace(ck.params, data.train, hc, s.config.schedule.masking);
      const std::string line = "tr_h = " + format_number(t) + "\n";
      s.write("trace/" + stem(ckpt_path) + ".txt", line);
      std::cout << line;
      s.finish();
    } else if (*pgm) {
      Session s(common, "pgm");
      const auto ck = load_or_throw(ckpt_path);
      const auto data = prepare_data(s.config);
      const auto v = vocab_for(vocab_path, data);
      const auto t = pick_task(s.config, task, task_csv);
      const auto gs = mlm_principal_gradient(ck.params, data.validation, s.config.pgm_k, s.config.pgm_minibatch,
                                             derive_seed(seed, "pgm-source"), s.config.schedule.masking);
      const auto gt = task_principal_gradient(ck.params, v, t, s.config.pgm_k, derive_seed(seed, "pgm-target"));
      const std::string line = "pgm = " + format_number(pgm_distance(gs, gt)) + "\n";
      s.write("pgm/" + stem(ckpt_path) + "_" + t.name + ".txt", line);
      std::cout << line;
      s.finish();
    } else if (*cons) {
      Session s(common, "consistency");
      const Axis axis = parse_axis(axis_name);
      const auto rows = consistency_from_metrics(read_csv(metrics_path), to_string(axis));
      const std::string csv = consistency_csv(rows);
      s.write("analysis/consistency_" + to_string(axis) + ".csv", csv);
      std::cout << csv;
      s.finish();
    } else if (*fit) {
      Session s(common, "fit-scaling");
      const auto points = parse_scaling_points(read_csv(points_path));
      const auto f = fit_scaling_law(points);
      const std::string report = fit_report(f, points.size());
      s.write("analysis/fit_report.txt", report);
      std::cout << report;
      s.finish();
    } else if (*viz) {
      Session s(common, "pca-viz");
      const fs::path root(pca_dir);
      std::vector<fs::path> files;
      for (const auto& e : fs::directory_iterator(root / "checkpoints")) {
        if (e.path().extension() == ".ckpt") files.push_back(e.path());
      }
      std::sort(files.begin(), files.end());
      std::vector<Checkpoint> ckpts;
      std::vector<std::string> ids;
      std::map<std::string, std::string> by_name;  // file name -> checkpoint id
      for (const auto& f : files) {
        ckpts.push_back(load_checkpoint(f));
        ids.push_back(ckpts.back().meta.run_id + "/" + std::to_string(ckpts.back().meta.step));
        by_name[f.filename().string()] = ids.back();
      }
      std::vector<FinetunedModel> finetuned;
      if (fs::exists(root / "finetuned")) {
        std::vector<fs::path> tasks;
        for (const auto& e : fs::directory_iterator(root / "finetuned")) {
          if (e.is_directory()) tasks.push_back(e.path());
        }
        std::sort(tasks.begin(), tasks.end());
        for (const auto& tdir : tasks) {
          std::vector<fs::path> ff;
          for (const auto& e : fs::directory_iterator(tdir)) {
            if (e.path().extension() == ".ckpt") ff.push_back(e.path());
          }
          std::sort(ff.begin(), ff.end());
          for (const auto& f : ff) {
            auto it = by_name.find(f.filename().string());
            if (it == by_name.end()) throw std::invalid_argument("no checkpoint matches " + f.string());
            const std::string tname = tdir.filename().string();
            finetuned.push_back({it->second + ":" + tname, tname, it->second, load_checkpoint(f).params});
          }
        }
      }
      const auto items = collect_block_vectors(ckpts, finetuned, ids);
      std::vector<std::vector<double>> rows;
      for (const auto& it : items) rows.push_back(it.values);
      const auto proj = pca_project(rows, 2);
      const auto rel = relative_coords(proj, items);
      s.write("analysis/pca.csv", projection_csv(items, proj, rel));
      std::cout << "explained = " << format_number(proj.explained[0]) << " " << format_number(proj.explained[1])
                << "\n";
      s.finish();
    } else if (*budget) {
      Session s(common, "compute-budget");
      const auto b = pf_days(n_params, d_tokens);
      const std::string report = "flops = " + real(b.flops_total) + "\npf_days = " + real(b.pf_days) + "\n";
      s.write("analysis/compute_budget.txt", report);
      std::cout << report;
      s.finish();
    } else if (*pipe) {
      const auto config = load_run_config(common.config_path, common.overrides);
      const fs::path dir = common.run_dir.empty() ? run_directory(config) : fs::path(common.run_dir);
      const auto r = run_pipeline(config, parse_axis(axis_name), dir);
      std::cout << "records = " << r.records.size() << "\nrun_dir = " << dir.string() << "\n";
    }
  } catch (const UsageError& e) {
    std::fprintf(stderr, "error: usage: %s\n", one_line(e.what()).c_str());
    return 2;
  } catch (const CheckpointError& e) {
    std::fprintf(stderr, "error: checkpoint: %s\n", one_line(e.what()).c_str());
    return 3;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: invalid: %s\n", one_line(e.what()).c_str());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: runtime: %s\n", one_line(e.what()).c_str());
    return 1;
  }
  return 0;
}
