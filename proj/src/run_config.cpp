#include "clm/run_config.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include "clm/digest.hpp"

namespace clm {

using nlohmann::json;

namespace {

json shape_json(const ModelShape& m) {
  return {{"d_model", m.d_model}, {"n_head", m.n_head}, {"n_layer", m.n_layer}, {"d_ff", m.d_ff}};
}

ModelShape shape_from(const json& j) {
  ModelShape m;
  m.d_model = j.at("d_model").get<std::size_t>();
  m.n_head = j.at("n_head").get<std::size_t>();
  m.n_layer = j.at("n_layer").get<std::size_t>();
  m.d_ff = j.at("d_ff").get<std::size_t>();
  return m;
}

json transfer_json(const TransferOptions& o) {
  return {{"lr", o.lr},       {"max_epochs", o.max_epochs}, {"patience", o.patience}, {"weight_decay", o.weight_decay},
          {"beta1", o.beta1}, {"beta2", o.beta2},           {"adam_eps", o.adam_eps}, {"batch_size", o.batch_size}};
}

TransferOptions transfer_from(const json& j) {
  TransferOptions o;
  o.lr = j.at("lr").get<double>();
  o.max_epochs = j.at("max_epochs").get<std::size_t>();
  o.patience = j.at("patience").get<std::size_t>();
  o.weight_decay = j.at("weight_decay").get<double>();
  o.beta1 = j.at("beta1").get<double>();
  o.beta2 = j.at("beta2").get<double>();
  o.adam_eps = j.at("adam_eps").get<double>();
  o.batch_size = j.at("batch_size").get<std::size_t>();
  return o;
}

// Element templates for arrays, keyed by dotted path.
const std::map<std::string, json>& array_items() {
  static const std::map<std::string, json> items{
      {"tasks", json{{"name", ""}, {"source", ""}}},
      {"transfer.seeds", json(std::uint64_t{0})},
      {"axis.models", shape_json(ModelShape{})},
      {"axis.data_fractions", json(0.5)},
  };
  return items;
}

std::string type_name(const json& t) {
  if (t.is_number_unsigned()) return "non-negative integer";
  if (t.is_number_integer()) return "integer";
  if (t.is_number_float()) return "number";
  return t.type_name();
}

bool compatible(const json& v, const json& t) {
  if (t.is_number_unsigned()) return v.is_number_unsigned();
  if (t.is_number_integer()) return v.is_number_integer();
  if (t.is_number_float()) return v.is_number();
  return v.type() == t.type();
}

void check(const json& v, const json& t, const std::string& path) {
  const std::string where = path.empty() ? "<root>" : path;
  if (!compatible(v, t)) {
    throw std::invalid_argument("config: " + where + " must be " + type_name(t) + ", got " + v.type_name());
  }
  if (v.is_object()) {
    for (const auto& [key, val] : v.items()) {
      if (!t.contains(key)) throw std::invalid_argument("config: unknown key " + (path.empty() ? key : path + "." + key));
      check(val, t.at(key), path.empty() ? key : path + "." + key);
    }
  } else if (v.is_array()) {
    auto it = array_items().find(path);
    if (it == array_items().end()) throw std::logic_error("config: no item schema for " + path);
    for (std::size_t i = 0; i < v.size(); ++i) {
      const json& item = v[i];
      const std::string p = path + "[" + std::to_string(i) + "]";
      if (!compatible(item, it->second)) {
        throw std::invalid_argument("config: " + p + " must be " + type_name(it->second) + ", got " + item.type_name());
      }
      if (item.is_object()) {
        for (const auto& [key, val] : it->second.items()) {
          if (!item.contains(key)) throw std::invalid_argument("config: " + p + " is missing " + key);
          if (!compatible(item.at(key), val)) {
            throw std::invalid_argument("config: " + p + "." + key + " must be " + type_name(val));
          }
        }
        for (const auto& [key, val] : item.items()) {
          if (!it->second.contains(key)) throw std::invalid_argument("config: unknown key " + p + "." + key);
        }
      }
    }
  }
}

// Objects merge key by key; everything else (arrays included) replaces.
void overlay(json& base, const json& patch) {
  for (const auto& [key, val] : patch.items()) {
    if (val.is_object() && base.contains(key) && base[key].is_object()) overlay(base[key], val);
    else base[key] = val;
  }
}

void validate(const RunConfig& c) {
  if (c.run_id.empty() || c.run_id.find_first_of("/\\") != std::string::npos || c.run_id == "." || c.run_id == "..") {
    throw std::invalid_argument("config: run_id must be a plain non-empty name");
  }
  if (c.workers == 0) throw std::invalid_argument("config: workers must be at least 1");
  if (!(c.corpus.validation_fraction > 0 && c.corpus.validation_fraction < 1)) {
    throw std::invalid_argument("config: corpus.validation_fraction must lie in (0, 1)");
  }
  if (c.corpus.path.empty() && c.corpus.synthetic_tokens == 0) {
    throw std::invalid_argument("config: corpus.synthetic_tokens must be positive");
  }
  c.schedule.validate();
  if (c.transfer_seeds.empty()) throw std::invalid_argument("config: transfer.seeds is empty");
  for (const auto& t : c.tasks) {
    if (t.name.empty() || t.source.empty()) throw std::invalid_argument("config: every task needs a name and a source");
  }
  if (c.hutchinson_sequences == 0 || c.hutchinson_minibatch == 0) {
    throw std::invalid_argument("config: hutchinson sizes must be positive");
  }
  if (c.pgm_k == 0 || c.pgm_minibatch == 0) throw std::invalid_argument("config: pgm_k and pgm_minibatch must be positive");
  double prev = 0;
  for (double f : c.axis_fractions) {
    if (!(f > prev && f <= 1)) throw std::invalid_argument("config: axis.data_fractions must increase within (0, 1]");
    prev = f;
  }
}

}  // namespace

RunConfig default_run_config() { return RunConfig{}; }

json to_json(const RunConfig& c) {
  const auto& s = c.schedule;
  json tasks = json::array();
  for (const auto& t : c.tasks) tasks.push_back({{"name", t.name}, {"source", t.source}});
  json models = json::array();
  for (const auto& m : c.axis_models) models.push_back(shape_json(m));
  json model = shape_json(c.model);
  model["max_len"] = c.max_len;
  return {
      {"schema_version", c.schema_version},
      {"run_id", c.run_id},
      {"seed", c.seed},
      {"wall_clock", c.wall_clock},
      {"workers", c.workers},
      {"corpus",
       {{"path", c.corpus.path},
        {"synthetic_tokens", c.corpus.synthetic_tokens},
        {"validation_fraction", c.corpus.validation_fraction},
        {"max_tokens", c.corpus.max_tokens}}},
      {"model", model},
      {"schedule",
       {{"warmup_steps", s.warmup_steps},
        {"peak_lr", s.peak_lr},
        {"weight_decay", s.weight_decay},
        {"dropout", s.dropout},
        {"beta1", s.beta1},
        {"beta2", s.beta2},
        {"adam_eps", s.adam_eps},
        {"batch_size", s.batch_size},
        {"epochs", s.epochs},
        {"checkpoint_interval_epochs", s.checkpoint_interval_epochs},
        {"save_step0", s.save_step0},
        {"masking",
         {{"select_rate", s.masking.select_rate},
          {"mask_frac", s.masking.mask_frac},
          {"random_frac", s.masking.random_frac},
          {"keep_frac", s.masking.keep_frac}}}}},
      {"tasks", tasks},
      {"transfer",
       {{"seeds", c.transfer_seeds}, {"finetune", transfer_json(c.finetune)}, {"probe", transfer_json(c.probe)}}},
      {"metrics",
       {{"hutchinson_sequences", c.hutchinson_sequences},
        {"hutchinson_minibatch", c.hutchinson_minibatch},
        {"pgm_k", c.pgm_k},
        {"pgm_minibatch", c.pgm_minibatch},
        {"eval_seed", c.eval_seed}}},
      {"axis", {{"models", models}, {"data_fractions", c.axis_fractions}}},
  };
}

RunConfig run_config_from_json(const json& doc) {
  if (!doc.is_object()) throw std::invalid_argument("config: document must be an object");
  json merged = to_json(default_run_config());
  check(doc, merged, "");
  if (doc.contains("schema_version") && doc["schema_version"].get<int>() != kConfigSchemaVersion) {
    throw std::invalid_argument("config: unsupported schema_version " + doc["schema_version"].dump());
  }
  overlay(merged, doc);

  RunConfig c;
  c.run_id = merged["run_id"].get<std::string>();
  c.seed = merged["seed"].get<std::uint64_t>();
  c.wall_clock = merged["wall_clock"].get<std::int64_t>();
  c.workers = merged["workers"].get<std::size_t>();
  const auto& co = merged["corpus"];
  c.corpus.path = co["path"].get<std::string>();
  c.corpus.synthetic_tokens = co["synthetic_tokens"].get<std::size_t>();
  c.corpus.validation_fraction = co["validation_fraction"].get<double>();
  c.corpus.max_tokens = co["max_tokens"].get<std::size_t>();
  c.model = shape_from(merged["model"]);
  c.max_len = merged["model"]["max_len"].get<std::size_t>();
  const auto& s = merged["schedule"];
  c.schedule.warmup_steps = s["warmup_steps"].get<std::uint64_t>();
  c.schedule.peak_lr = s["peak_lr"].get<double>();
  c.schedule.weight_decay = s["weight_decay"].get<double>();
  c.schedule.dropout = s["dropout"].get<double>();
  c.schedule.beta1 = s["beta1"].get<double>();
  c.schedule.beta2 = s["beta2"].get<double>();
  c.schedule.adam_eps = s["adam_eps"].get<double>();
  c.schedule.batch_size = s["batch_size"].get<std::size_t>();
  c.schedule.epochs = s["epochs"].get<double>();
  c.schedule.checkpoint_interval_epochs = s["checkpoint_interval_epochs"].get<double>();
  c.schedule.save_step0 = s["save_step0"].get<bool>();
  c.schedule.masking.select_rate = s["masking"]["select_rate"].get<double>();
  c.schedule.masking.mask_frac = s["masking"]["mask_frac"].get<double>();
  c.schedule.masking.random_frac = s["masking"]["random_frac"].get<double>();
  c.schedule.masking.keep_frac = s["masking"]["keep_frac"].get<double>();
  for (const auto& t : merged["tasks"]) c.tasks.push_back({t["name"].get<std::string>(), t["source"].get<std::string>()});
  c.transfer_seeds = merged["transfer"]["seeds"].get<std::vector<std::uint64_t>>();
  c.finetune = transfer_from(merged["transfer"]["finetune"]);
  c.probe = transfer_from(merged["transfer"]["probe"]);
  const auto& m = merged["metrics"];
  c.hutchinson_sequences = m["hutchinson_sequences"].get<std::size_t>();
  c.hutchinson_minibatch = m["hutchinson_minibatch"].get<std::size_t>();
  c.pgm_k = m["pgm_k"].get<std::size_t>();
  c.pgm_minibatch = m["pgm_minibatch"].get<std::size_t>();
  c.eval_seed = m["eval_seed"].get<std::uint64_t>();
  for (const auto& x : merged["axis"]["models"]) c.axis_models.push_back(shape_from(x));
  c.axis_fractions = merged["axis"]["data_fractions"].get<std::vector<double>>();
  validate(c);
  return c;
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw std::invalid_argument("override must look like key.path=value: " + assignment);
  const std::string key = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;

  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw std::invalid_argument("override has an empty key segment: " + key);
    if (!node->is_object()) throw std::invalid_argument("override path crosses a non-object: " + key);
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  json doc = json::object();
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    try {
      doc = json::parse(ss.str());
    } catch (const json::parse_error& e) {
      throw std::invalid_argument("config " + path.string() + " is not valid JSON: " + e.what());
    }
    // Paths inside the document are relative to the document itself.
    const auto base = std::filesystem::absolute(path).parent_path();
    auto resolve = [&](json& v) {
      if (v.is_string() && !v.get<std::string>().empty() && v.get<std::string>().rfind("toy:", 0) != 0 &&
          std::filesystem::path(v.get<std::string>()).is_relative()) {
        v = (base / v.get<std::string>()).lexically_normal().string();
      }
    };
    if (doc.is_object() && doc.contains("corpus") && doc["corpus"].is_object() && doc["corpus"].contains("path")) {
      resolve(doc["corpus"]["path"]);
    }
    if (doc.is_object() && doc.contains("tasks") && doc["tasks"].is_array()) {
      for (auto& t : doc["tasks"]) {
        if (t.is_object() && t.contains("source")) resolve(t["source"]);
      }
    }
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return run_config_from_json(doc);
}

std::string run_config_hash(const RunConfig& c) { return sha256_hex(to_json(c).dump()); }

}  // namespace clm
