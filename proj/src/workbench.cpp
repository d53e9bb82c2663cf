#include "clm/workbench.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cmath>
#include <chrono>
#include <cstdlib>
#include <cstring>
#include <ctime>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <thread>

#include <fmt/format.h>

#include "clm/csv.hpp"
#include "clm/digest.hpp"
#include "clm/pca.hpp"
#include "clm/scaling.hpp"
#include "clm/toy_data.hpp"

namespace clm {

namespace fs = std::filesystem;
using nlohmann::json;

fs::path run_root() {
  const char* env = std::getenv(kRunRootEnv);
  return (env && *env) ? fs::path(env) : fs::path("runs");
}

fs::path run_directory(const RunConfig& config) { return run_root() / config.run_id; }

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---- manifest ---------------------------------------------------------------

json to_json(const RunManifest& m) {
  json ckpts = json::array();
  for (const auto& c : m.checkpoints) {
    ckpts.push_back({{"id", c.id}, {"epoch_fraction", c.epoch_fraction}, {"path", c.path}, {"config_hash", c.config_hash}});
  }
  json files = json::array();
  for (const auto& f : m.files) files.push_back({{"path", f.path}, {"sha256", f.sha256}});
  return {{"command", m.command},         {"run_id", m.run_id},     {"config_hash", m.config_hash},
          {"corpus_digest", m.corpus_digest}, {"seeds", m.seeds},   {"schedule", m.schedule},
          {"checkpoints", ckpts},         {"files", files},         {"tool_version", m.tool_version},
          {"started", m.started},         {"finished", m.finished}};
}

RunManifest manifest_from_json(const json& j) {
  RunManifest m;
  m.command = j.at("command").get<std::string>();
  m.run_id = j.at("run_id").get<std::string>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.corpus_digest = j.at("corpus_digest").get<std::string>();
  m.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  m.schedule = j.at("schedule");
  for (const auto& c : j.at("checkpoints")) {
    m.checkpoints.push_back({c.at("id").get<std::string>(), c.at("epoch_fraction").get<double>(),
                             c.at("path").get<std::string>(), c.at("config_hash").get<std::string>()});
  }
  for (const auto& f : j.at("files")) m.files.push_back({f.at("path").get<std::string>(), f.at("sha256").get<std::string>()});
  m.tool_version = j.at("tool_version").get<std::string>();
  m.started = j.at("started").get<std::string>();
  m.finished = j.at("finished").get<std::string>();
  return m;
}

void append_manifest(const fs::path& run_dir, const RunManifest& m) {
  fs::create_directories(run_dir);
  const fs::path path = run_dir / "manifest.jsonl";
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd < 0) throw std::runtime_error("cannot open " + path.string() + ": " + std::strerror(errno));
  if (::flock(fd, LOCK_EX) != 0) {
    ::close(fd);
    throw std::runtime_error("cannot lock " + path.string());
  }
  const std::string line = to_json(m).dump() + "\n";
  std::size_t off = 0;
  bool ok = true;
  while (off < line.size()) {
    const ssize_t n = ::write(fd, line.data() + off, line.size() - off);
    if (n <= 0) {
      ok = false;
      break;
    }
    off += static_cast<std::size_t>(n);
  }
  ::flock(fd, LOCK_UN);
  ::close(fd);
  if (!ok) throw std::runtime_error("short write to " + path.string());
}

std::vector<RunManifest> read_manifest(const fs::path& run_dir) {
  std::ifstream in(run_dir / "manifest.jsonl");
  if (!in) throw std::runtime_error("no manifest in " + run_dir.string());
  std::vector<RunManifest> out;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) out.push_back(manifest_from_json(json::parse(line)));
  }
  return out;
}

std::vector<std::string> verify_manifest(const fs::path& run_dir) {
  std::map<std::string, std::string> files;
  std::map<std::string, std::string> ckpts;  // path -> config hash
  for (const auto& m : read_manifest(run_dir)) {
    for (const auto& f : m.files) files[f.path] = f.sha256;
    for (const auto& c : m.checkpoints) ckpts[c.path] = c.config_hash;
  }
  std::vector<std::string> problems;
  for (const auto& [path, hash] : files) {
    const fs::path p = run_dir / path;
    if (!fs::exists(p)) problems.push_back("missing " + path);
    else if (sha256_file(p) != hash) problems.push_back("hash mismatch " + path);
  }
  for (const auto& [path, hash] : ckpts) {
    try {
      load_checkpoint(run_dir / path, hash);
    } catch (const std::exception& e) {
      problems.push_back("checkpoint " + path + ": " + e.what());
    }
  }
  return problems;
}

void add_file(RunManifest& m, const fs::path& run_dir, const fs::path& path) {
  const fs::path abs = path.is_absolute() ? path : run_dir / path;
  const std::string rel = fs::relative(abs, run_dir).generic_string();
  const std::string hash = sha256_file(abs);
  for (auto& f : m.files) {
    if (f.path == rel) {
      f.sha256 = hash;
      return;
    }
  }
  m.files.push_back({rel, hash});
}

// ---- data -------------------------------------------------------------------

std::vector<std::string> corpus_lines(const RunConfig& config) {
  if (!config.corpus.path.empty()) return read_lines(config.corpus.path);
  return synthetic_corpus(config.corpus.synthetic_tokens, derive_seed(config.seed, "synthetic-corpus"));
}

DownstreamTask load_task(const TaskSpec& spec, std::uint64_t seed) {
  const std::string& s = spec.source;
  if (s.rfind("toy:", 0) == 0) {
    const auto colon = s.find(':', 4);
    if (colon == std::string::npos) throw std::invalid_argument("task source " + s + ": expected toy:<kind>:<n>");
    const std::string kind = s.substr(4, colon - 4);
    std::size_t n = 0;
    try {
      n = std::stoul(s.substr(colon + 1));
    } catch (const std::logic_error&) {
      throw std::invalid_argument("task source " + s + ": bad size");
    }
    const std::uint64_t task_seed = derive_seed(seed, "toy-task");
    if (kind == "classification") {
      return parse_task_csv(toy_task_csv(toy_classification_task(n, task_seed), {"halogen"}), spec.name);
    }
    if (kind == "regression") {
      return parse_task_csv(toy_task_csv(toy_regression_task(n, task_seed), {"hetero_fraction"}), spec.name,
                            TaskKind::regression);
    }
    throw std::invalid_argument("task source " + s + ": unknown toy kind " + kind);
  }
  auto task = load_task_csv(s);
  task.name = spec.name;
  return task;
}

PreparedData prepare_data(const RunConfig& config) {
  PreparedData d;
  const auto lines = corpus_lines(config);
  IngestOptions opt;
  opt.max_tokens = config.corpus.max_tokens;
  opt.validation_fraction = config.corpus.validation_fraction;
  d.corpus = ingest_corpus(lines, derive_seed(config.seed, "ingest"), opt);
  d.train = tokenize_all(d.corpus.train, d.corpus.vocab);
  d.validation = tokenize_all(d.corpus.validation, d.corpus.vocab);
  d.corpus_digest = sha256_hex(join_lines(d.corpus.train) + "\x1e" + join_lines(d.corpus.validation));
  for (const auto& t : config.tasks) d.tasks.push_back(load_task(t, config.seed));
  return d;
}

ModelConfig model_config(const RunConfig& config, const ModelShape& shape, const PreparedData& data) {
  ModelConfig m;
  m.d_model = shape.d_model;
  m.n_head = shape.n_head;
  m.n_layer = shape.n_layer;
  m.d_ff = shape.d_ff;
  m.vocab_size = data.corpus.vocab.size();
  m.dropout_rate = config.schedule.dropout;
  if (config.max_len) {
    m.max_len = config.max_len;
  } else {
    std::size_t longest = 0;
    for (const auto* set : {&data.train, &data.validation}) {
      for (const auto& s : *set) longest = std::max(longest, s.size());
    }
    m.max_len = longest + 2;
  }
  m.validate();
  return m;
}

// ---- metrics ----------------------------------------------------------------

void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

CheckpointEvaluation evaluate_checkpoint(const RunConfig& config, const PreparedData& data, const EvaluatedModel& model,
                                         std::uint64_t index) {
  const auto& masking = config.schedule.masking;
  const auto& vocab = data.corpus.vocab;
  CheckpointEvaluation out;
  MetricRecord& rec = out.record;
  rec.checkpoint_id = model.id;
  rec.epoch_fraction = model.epoch_fraction;
  rec.l_pre = eval_pretrain_loss(model.params, data.validation, config.eval_seed, masking);

  HutchinsonConfig hc;
  hc.n_sequences = config.hutchinson_sequences;
  hc.minibatch_size = config.hutchinson_minibatch;
  hc.seed = derive_seed(config.seed, "hutchinson", index);
  rec.tr_h = hessian_trace(model.params, data.train, hc, masking);

  const auto g_source = mlm_principal_gradient(model.params, data.validation, config.pgm_k, config.pgm_minibatch,
                                               derive_seed(config.seed, "pgm-source", index), masking);
  for (const auto& task : data.tasks) {
    TaskMetrics tm;
    tm.l_down = zero_shot_downstream_loss(model.params, vocab, task.smiles, config.eval_seed, masking);
    const auto g_target =
        task_principal_gradient(model.params, vocab, task, config.pgm_k, derive_seed(config.seed, "pgm-target", index));
    tm.pgm = pgm_distance(g_source, g_target);
    for (std::size_t i = 0; i < config.transfer_seeds.size(); ++i) {
      const auto s = config.transfer_seeds[i];
      auto ft = finetune(model.params, vocab, task, s, config.finetune);
      tm.scores.push_back({"ft", s, ft.metric_name, ft.metric});
      if (i == 0) out.finetuned.push_back({model.id + ":" + task.name, task.name, model.id, std::move(ft.encoder)});
      const auto lp = linear_probe(model.params, vocab, task, s, config.probe);
      tm.scores.push_back({"lp", s, lp.metric_name, lp.metric});
    }
    rec.tasks[task.name] = std::move(tm);
  }
  rec.validate();
  return out;
}

// ---- pipeline ---------------------------------------------------------------

Axis parse_axis(std::string_view s) {
  if (s == "compute") return Axis::compute;
  if (s == "model") return Axis::model;
  if (s == "data") return Axis::data;
  throw std::invalid_argument("unknown axis " + std::string(s) + " (expected compute, model or data)");
}

std::string to_string(Axis a) {
  switch (a) {
    case Axis::compute: return "compute";
    case Axis::model: return "model";
    case Axis::data: return "data";
  }
  return "?";
}

std::string records_csv(const std::vector<EvaluatedModel>& models, const std::vector<MetricRecord>& records) {
  CsvWriter w({"checkpoint_id", "epoch_fraction", "step", "tokens_seen", "n_params", "l_pre", "tr_h"});
  for (std::size_t i = 0; i < models.size(); ++i) {
    const auto& m = models[i];
    w.add({m.id, format_number(m.epoch_fraction), std::to_string(m.step), std::to_string(m.tokens_seen),
           std::to_string(count_non_embedding_params(m.params.config)), format_number(records[i].l_pre),
           format_number(records[i].tr_h)});
  }
  return w.str();
}

std::string metrics_csv(const std::vector<MetricRecord>& records) {
  CsvWriter w(kMetricsHeader);
  for (const auto& r : records) {
    for (auto& row : metric_rows(r)) w.add(std::move(row));
  }
  return w.str();
}

std::string consistency_csv(const std::vector<ConsistencyRow>& rows) {
  CsvWriter w({"task", "axis", "mode", "rho", "n_checkpoints"});
  for (const auto& r : rows) {
    w.add({r.task, r.axis, r.mode, std::isnan(r.rho) ? "nan" : format_number(r.rho), std::to_string(r.n_checkpoints)});
  }
  return w.str();
}

namespace {

std::string step_name(std::uint64_t step) { return fmt::format("step_{:08d}.ckpt", step); }

struct Writer {
  fs::path run_dir;
  RunManifest& manifest;

  void text(const fs::path& rel, const std::string& body) {
    fs::create_directories((run_dir / rel).parent_path());
    write_file_atomic(run_dir / rel, body);
    add_file(manifest, run_dir, rel);
  }
  void checkpoint(const fs::path& rel, const Checkpoint& c, const std::string& id) {
    fs::create_directories((run_dir / rel).parent_path());
    save_checkpoint(c, run_dir / rel);
    add_file(manifest, run_dir, rel);
    manifest.checkpoints.push_back({id, c.meta.epoch_fraction, rel.generic_string(), c.meta.config_hash});
  }
};

void check_sizes(const RunConfig& config, const PreparedData& data) {
  if (data.train.size() < config.hutchinson_sequences) {
    throw std::invalid_argument(fmt::format("metrics.hutchinson_sequences = {} exceeds the {} training sequences",
                                            config.hutchinson_sequences, data.train.size()));
  }
  if (data.tasks.empty()) throw std::invalid_argument("config: tasks is empty");
}

}  // namespace

PipelineResult run_pipeline(const RunConfig& config, Axis axis, const fs::path& run_dir) {
  PipelineResult result;
  result.run_dir = run_dir;
  RunManifest& man = result.manifest;
  man.command = "pipeline --axis " + to_string(axis);
  man.run_id = config.run_id;
  man.config_hash = run_config_hash(config);
  man.seeds = config.transfer_seeds;
  man.schedule = to_json(config)["schedule"];
  man.started = utc_now();
  Writer out{run_dir, man};

  const PreparedData data = prepare_data(config);
  man.corpus_digest = data.corpus_digest;
  check_sizes(config, data);
  out.text("corpus/train.smi", join_lines(data.corpus.train));
  out.text("corpus/validation.smi", join_lines(data.corpus.validation));
  out.text("corpus/vocab.txt", join_lines(data.corpus.vocab.tokens()));
  out.text("config.json", to_json(config).dump(2) + "\n");

  const fs::path ax = to_string(axis);
  // Stale checkpoints from an earlier run would be picked up by directory scans.
  fs::remove_all(run_dir / ax);
  std::vector<EvaluatedModel> models;
  auto as_model = [](const std::string& id, const Checkpoint& c) {
    return EvaluatedModel{id, c.meta.epoch_fraction, c.meta.step, c.meta.tokens_seen, c.params};
  };

  if (axis == Axis::compute) {
    const ModelConfig mc = model_config(config, config.model, data);
    std::vector<Checkpoint> ckpts;
    train(mc, config.schedule, data.train, config.seed, [&](const Checkpoint& c) { ckpts.push_back(c); },
          {config.run_id, config.wall_clock});
    for (const auto& c : ckpts) {
      const std::string id = config.run_id + "/" + std::to_string(c.meta.step);
      out.checkpoint(ax / "checkpoints" / step_name(c.meta.step), c, id);
      models.push_back(as_model(id, c));
    }
  } else {
    std::vector<std::pair<std::string, std::vector<TokenSequence>>> runs;  // id, train set
    std::vector<ModelShape> shapes;
    if (axis == Axis::model) {
      if (config.axis_models.empty()) throw std::invalid_argument("config: axis.models is empty");
      for (std::size_t i = 0; i < config.axis_models.size(); ++i) {
        const auto& s = config.axis_models[i];
        runs.push_back({fmt::format("model-{}x{}x{}", s.d_model, s.n_layer, s.d_ff), data.train});
        shapes.push_back(s);
      }
    } else {
      if (config.axis_fractions.empty()) throw std::invalid_argument("config: axis.data_fractions is empty");
      const auto subsets = nested_subsample(data.corpus.train, config.axis_fractions, derive_seed(config.seed, "nested"));
      for (std::size_t i = 0; i < subsets.size(); ++i) {
        runs.push_back({"data-" + format_number(config.axis_fractions[i]), tokenize_all(subsets[i], data.corpus.vocab)});
        shapes.push_back(config.model);
      }
    }
    for (std::size_t i = 0; i < runs.size(); ++i) {
      const std::string sub = config.run_id + "-" + runs[i].first;
      TrainSchedule sched = config.schedule;
      sched.save_step0 = false;
      std::optional<Checkpoint> last;
      train(model_config(config, shapes[i], data), sched, runs[i].second, config.seed,
            [&](const Checkpoint& c) { last = c; }, {sub, config.wall_clock});
      if (!last) throw std::runtime_error("run " + sub + " emitted no checkpoint");
      out.checkpoint(ax / "checkpoints" / (runs[i].first + ".ckpt"), *last, runs[i].first);
      models.push_back(as_model(runs[i].first, *last));
    }
  }

  std::vector<CheckpointEvaluation> evals(models.size());
  parallel_for(models.size(), config.workers,
               [&](std::size_t i) { evals[i] = evaluate_checkpoint(config, data, models[i], i); });
  for (const auto& e : evals) result.records.push_back(e.record);

  const std::string metrics = metrics_csv(result.records);
  out.text(ax / "metrics.csv", metrics);
  out.text(ax / "records.csv", records_csv(models, result.records));
  out.text(ax / "consistency.csv", consistency_csv(consistency_from_metrics(parse_csv(metrics), to_string(axis))));

  CsvWriter compute({"checkpoint_id", "n_params", "tokens_seen", "flops", "pf_days"});
  for (const auto& m : models) {
    const double n = static_cast<double>(count_non_embedding_params(m.params.config));
    const auto b = pf_days(n, static_cast<double>(m.tokens_seen));
    compute.add({m.id, format_number(n), std::to_string(m.tokens_seen), format_number(b.flops_total),
                 format_number(b.pf_days)});
  }
  out.text(ax / "compute.csv", compute.str());

  if (axis == Axis::compute) {
    std::vector<Checkpoint> ckpts;
    std::vector<std::string> ids;
    std::vector<FinetunedModel> finetuned;
    for (std::size_t i = 0; i < models.size(); ++i) {
      ckpts.push_back({models[i].params, {}});
      ckpts.back().meta.epoch_fraction = models[i].epoch_fraction;
      ids.push_back(models[i].id);
      for (auto& f : evals[i].finetuned) {
        Checkpoint fc{f.params, {}};
        fc.meta.run_id = config.run_id + "-ft-" + f.task;
        fc.meta.step = models[i].step;
        fc.meta.epoch_fraction = models[i].epoch_fraction;
        fc.meta.wall_clock = config.wall_clock;
        fc.meta.config_hash = config_hash(f.params.config);
        out.checkpoint(ax / "finetuned" / f.task / step_name(models[i].step), fc, f.id);
        finetuned.push_back(std::move(f));
      }
    }
    const auto items = collect_block_vectors(ckpts, finetuned, ids);
    std::vector<std::vector<double>> rows;
    for (const auto& it : items) rows.push_back(it.values);
    const auto proj = pca_project(rows, 2);
    const auto rel = relative_coords(proj, items);
    out.text(ax / "pca.csv", projection_csv(items, proj, rel));
  } else {
    CsvWriter pts({"checkpoint_id", "N", "D", "loss"});
    for (std::size_t i = 0; i < models.size(); ++i) {
      pts.add({models[i].id, std::to_string(count_non_embedding_params(models[i].params.config)),
               std::to_string(models[i].tokens_seen), format_number(result.records[i].l_pre)});
    }
    out.text(ax / "scaling_points.csv", pts.str());
  }

  man.finished = utc_now();
  append_manifest(run_dir, man);
  return result;
}

}  // namespace clm
