#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "clm/checkpoint.hpp"
#include "clm/corpus.hpp"
#include "clm/csv.hpp"
#include "clm/digest.hpp"
#include "clm/run_config.hpp"
#include "clm/toy_data.hpp"
#include "clm/workbench.hpp"

using namespace clm;
namespace fs = std::filesystem;

#ifndef CLM_SOURCE_DIR
#error "CLM_SOURCE_DIR must be defined"
#endif

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("clm_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Checkpoint sample_checkpoint(std::uint64_t seed = 3) {
  ModelConfig c;
  c.d_model = 8;
  c.n_head = 2;
  c.n_layer = 1;
  c.d_ff = 16;
  c.vocab_size = 11;
  c.max_len = 10;
  Checkpoint ck{init_model(c, seed), {}};
  ck.meta.run_id = "r";
  ck.meta.step = 12;
  ck.meta.epoch_fraction = 0.25;
  ck.meta.tokens_seen = 345;
  ck.meta.rng_digest = "abc";
  ck.meta.config_hash = config_hash(c);
  return ck;
}

CheckpointErrorKind load_error(std::span<const std::uint8_t> bytes,
                               const std::optional<std::string>& hash = std::nullopt) {
  try {
    deserialize_checkpoint(bytes, hash);
  } catch (const CheckpointError& e) {
    return e.kind();
  }
  ADD_FAILURE() << "no error";
  return CheckpointErrorKind::io;
}

}  // namespace

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  const auto dir = scratch("ckpt");
  const auto ck = sample_checkpoint();
  save_checkpoint(ck, dir / "a.ckpt");
  const auto back = load_checkpoint(dir / "a.ckpt");
  EXPECT_EQ(back.params, ck.params);
  EXPECT_EQ(back.meta, ck.meta);
  save_checkpoint(back, dir / "b.ckpt");
  EXPECT_EQ(slurp(dir / "a.ckpt"), slurp(dir / "b.ckpt"));
  for (const auto& e : fs::directory_iterator(dir)) EXPECT_EQ(e.path().extension(), ".ckpt");  // no temporaries left
  fs::remove_all(dir);
}

TEST(Checkpoint, DistinctErrors) {
  const auto ck = sample_checkpoint();
  const auto bytes = serialize_checkpoint(ck);

  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_EQ(load_error(bad), CheckpointErrorKind::bad_magic);

  bad = bytes;
  bad.back() ^= 0x01;
  EXPECT_EQ(load_error(bad), CheckpointErrorKind::checksum_mismatch);

  bad.assign(bytes.begin(), bytes.end() - 4);
  EXPECT_EQ(load_error(bad), CheckpointErrorKind::truncated);

  EXPECT_EQ(load_error(bytes, std::string(64, '0')), CheckpointErrorKind::config_mismatch);
  EXPECT_NO_THROW(deserialize_checkpoint(bytes, ck.meta.config_hash));
}

TEST(Checkpoint, EveryPayloadByteIsCovered) {
  const auto bytes = serialize_checkpoint(sample_checkpoint());
  // Flip bytes spread over the payload (the tail of the file).
  for (std::size_t k = 1; k <= 40; ++k) {
    auto bad = bytes;
    bad[bad.size() - k * 37] ^= 0x80;
    EXPECT_THROW(deserialize_checkpoint(bad), CheckpointError) << k;
  }
}

TEST(Checkpoint, EveryHeaderByteIsCovered) {
  const auto bytes = serialize_checkpoint(sample_checkpoint());
  std::uint64_t header_len = 0;
  for (int i = 0; i < 8; ++i) header_len |= static_cast<std::uint64_t>(bytes[8 + i]) << (8 * i);
  for (std::size_t k = 16; k < 16 + header_len; ++k) {
    for (std::uint8_t mask : {0x01, 0x02, 0x04}) {
      auto bad = bytes;
      bad[k] ^= mask;
      EXPECT_THROW(deserialize_checkpoint(bad), CheckpointError) << k;
    }
  }
}

TEST(Ingest, TenMoleculesSplitNineOne) {
  std::vector<std::string> lines{"C", "CC", "CCC", "CCCC", "CO", "CN", "CCO", "CCN", "c1ccccc1", "OCC"};
  const auto a = ingest_corpus(lines, 5);
  const auto b = ingest_corpus(lines, 5);
  EXPECT_EQ(a.train.size(), 9u);
  EXPECT_EQ(a.validation.size(), 1u);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.validation, b.validation);

  auto dup = lines;
  dup.push_back("CC");
  const auto d = ingest_corpus(dup, 5);
  EXPECT_EQ(d.n_duplicates, 1u);
  EXPECT_EQ(d.train.size() + d.validation.size(), 10u);
  EXPECT_THROW(ingest_corpus(std::vector<std::string>{"", ""}, 1), std::invalid_argument);
}

TEST(Ingest, PartitionOfLargeCorpus) {
  Rng rng(8);
  std::vector<std::string> lines;
  for (int i = 0; i < 100000; ++i) lines.push_back(sample_smiles(rng));
  const auto r = ingest_corpus(lines, 9);
  std::set<std::string> train(r.train.begin(), r.train.end()), valid(r.validation.begin(), r.validation.end());
  std::set<std::string> all(lines.begin(), lines.end());
  for (const auto& v : valid) EXPECT_FALSE(train.count(v));
  std::set<std::string> uni = train;
  uni.insert(valid.begin(), valid.end());
  EXPECT_EQ(uni, all);
  EXPECT_EQ(r.train.size() + r.validation.size(), all.size());
}

TEST(Nested, PrefixSizesAndSubsets) {
  std::vector<std::string> items;
  for (int i = 0; i < 100; ++i) items.push_back("C" + std::to_string(i));
  const std::vector<double> f{0.1, 0.5, 1.0};
  const auto sets = nested_subsample(items, f, 4);
  ASSERT_EQ(sets.size(), 3u);
  EXPECT_EQ(sets[0].size(), 10u);
  EXPECT_EQ(sets[1].size(), 50u);
  EXPECT_EQ(sets[2].size(), 100u);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(sets[0][i], sets[1][i]);

  // Token-budget ratios 0.7 : 1.3 : 2.7 : 5.3 : 42.4 scaled to the corpus.
  std::vector<double> ratios{0.7, 1.3, 2.7, 5.3, 42.4};
  for (auto& r : ratios) r /= 42.4;
  const auto fam = nested_subsample(items, ratios, 11);
  for (std::size_t i = 0; i + 1 < fam.size(); ++i) {
    std::set<std::string> big(fam[i + 1].begin(), fam[i + 1].end());
    for (const auto& x : fam[i]) EXPECT_TRUE(big.count(x));
  }
  EXPECT_EQ(nested_subsample(items, std::vector<double>{1.0}, 1)[0].size(), 100u);
  EXPECT_THROW(nested_subsample(items, std::vector<double>{0.5, 0.2}, 1), std::invalid_argument);
}

TEST(Csv, QuotingAndNumbers) {
  CsvWriter w({"a", "b"});
  w.add({"x,y", "say \"hi\""});
  w.add({"line\nbreak", format_number(0.1)});
  const auto t = parse_csv(w.str());
  ASSERT_EQ(t.rows.size(), 2u);
  EXPECT_EQ(t.rows[0][0], "x,y");
  EXPECT_EQ(t.rows[0][1], "say \"hi\"");
  EXPECT_EQ(t.rows[1][0], "line\nbreak");
  EXPECT_EQ(std::stod(t.rows[1][1]), 0.1);
  for (double v : {1.0 / 3, 6.02214076e23, -2.5e-300, 42.0}) EXPECT_EQ(std::stod(format_number(v)), v);
  EXPECT_THROW(parse_csv("a,b\n1\n"), std::invalid_argument);
}

TEST(ToyData, ShippedTasksMatchGenerator) {
  const fs::path data = fs::path(CLM_SOURCE_DIR) / "data";
  EXPECT_EQ(slurp(data / "toy_classification.csv"), toy_task_csv(toy_classification_task(240, 2024), {"halogen"}));
  EXPECT_EQ(slurp(data / "toy_regression.csv"), toy_task_csv(toy_regression_task(240, 2024), {"hetero_fraction"}));
  const auto t = load_task_csv(data / "toy_classification.csv");
  EXPECT_EQ(t.kind, TaskKind::classification);
  std::size_t pos = 0;
  for (double y : t.labels) pos += y == 1.0;
  EXPECT_EQ(pos * 2, t.labels.size());
}

TEST(RunConfig, DefaultsRoundTrip) {
  const auto c = default_run_config();
  const auto back = run_config_from_json(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(run_config_hash(back), run_config_hash(c));
}

TEST(RunConfig, SchemaViolations) {
  using nlohmann::json;
  EXPECT_THROW(run_config_from_json(json{{"bogus", 1}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"d_model", "big"}}}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json(json{{"model", {{"d_model", -4}}}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json(json{{"schema_version", 2}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json(json{{"tasks", {{{"name", "x"}}}}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json(json{{"transfer", {{"seeds", {1.5}}}}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json(json{{"run_id", "a/b"}}), std::invalid_argument);
  EXPECT_THROW(run_config_from_json(json{{"axis", {{"data_fractions", {0.5, 0.2}}}}}), std::invalid_argument);
  // Integers are accepted where reals are expected.
  EXPECT_EQ(run_config_from_json(json{{"schedule", {{"epochs", 2}}}}).schedule.epochs, 2.0);
}

TEST(RunConfig, OverridesAndRelativePaths) {
  const auto dir = scratch("cfg");
  std::ofstream(dir / "c.json") << R"({"run_id": "x", "tasks": [{"name": "t", "source": "sub/t.csv"}],
                                       "corpus": {"path": "corpus.smi"}})";
  const auto c = load_run_config(dir / "c.json", {"model.d_model=32", "run_id=y", "transfer.seeds=[4,5]",
                                                  "schedule.peak_lr=0.002"});
  EXPECT_EQ(c.model.d_model, 32u);
  EXPECT_EQ(c.run_id, "y");
  EXPECT_EQ(c.transfer_seeds, (std::vector<std::uint64_t>{4, 5}));
  EXPECT_EQ(c.schedule.peak_lr, 0.002);
  EXPECT_EQ(fs::path(c.tasks[0].source), (dir / "sub/t.csv").lexically_normal());
  EXPECT_EQ(fs::path(c.corpus.path), (dir / "corpus.smi").lexically_normal());
  EXPECT_THROW(load_run_config(dir / "c.json", {"model.width=3"}), std::invalid_argument);
  EXPECT_THROW(load_run_config(dir / "c.json", {"noequals"}), std::invalid_argument);
  std::ofstream(dir / "bad.json") << "{ not json";
  EXPECT_THROW(load_run_config(dir / "bad.json", {}), std::invalid_argument);
  fs::remove_all(dir);
}

TEST(RunConfig, ShippedPresetsValidate) {
  const fs::path cfg = fs::path(CLM_SOURCE_DIR) / "configs";
  for (const char* name : {"desk.json", "micro.json"}) {
    const auto c = load_run_config(cfg / name, {});
    EXPECT_FALSE(c.tasks.empty()) << name;
  }
  const auto desk = load_run_config(cfg / "desk.json", {});
  EXPECT_EQ(desk.model.d_model, 64u);
  EXPECT_EQ(desk.corpus.synthetic_tokens, 100000u);
  EXPECT_EQ(desk.schedule.epochs, 4.0);
  EXPECT_EQ(desk.hutchinson_sequences, 2048u);
  for (const auto& t : desk.tasks) EXPECT_TRUE(fs::exists(t.source)) << t.source;
}

TEST(Manifest, AppendVerifyAndTamper) {
  const auto dir = scratch("manifest");
  RunManifest m;
  m.command = "test";
  m.run_id = "r";
  write_file_atomic(dir / "a.txt", std::string_view("hello\n"));
  add_file(m, dir, "a.txt");
  const auto ck = sample_checkpoint();
  save_checkpoint(ck, dir / "c.ckpt");
  add_file(m, dir, "c.ckpt");
  m.checkpoints.push_back({"r/12", 0.25, "c.ckpt", ck.meta.config_hash});
  append_manifest(dir, m);
  append_manifest(dir, m);
  EXPECT_EQ(read_manifest(dir).size(), 2u);
  EXPECT_EQ(to_json(read_manifest(dir)[0]), to_json(m));
  EXPECT_TRUE(verify_manifest(dir).empty());

  write_file_atomic(dir / "a.txt", std::string_view("changed\n"));
  auto problems = verify_manifest(dir);
  ASSERT_EQ(problems.size(), 1u);
  EXPECT_NE(problems[0].find("a.txt"), std::string::npos);
  fs::remove(dir / "c.ckpt");
  EXPECT_EQ(verify_manifest(dir).size(), 3u);  // a.txt hash, c.ckpt missing and unloadable
  fs::remove_all(dir);
}

TEST(ParallelFor, SlotsAndErrors) {
  std::vector<std::size_t> out(50);
  parallel_for(out.size(), 4, [&](std::size_t i) { out[i] = i * i; });
  for (std::size_t i = 0; i < out.size(); ++i) EXPECT_EQ(out[i], i * i);
  EXPECT_THROW(parallel_for(10, 3,
                            [](std::size_t i) {
                              if (i == 7) throw std::runtime_error("x");
                            }),
               std::runtime_error);
}

TEST(Pipeline, MicroComputeAxisIsReproducible) {
  const auto root = scratch("pipe");
  auto config = load_run_config(fs::path(CLM_SOURCE_DIR) / "configs" / "micro.json", {});
  const auto a = run_pipeline(config, Axis::compute, root / "a");
  config.workers = 2;  // the fan-out must not change any artifact
  const auto b = run_pipeline(config, Axis::compute, root / "b");

  // epochs 1, interval 0.25, plus step 0
  EXPECT_EQ(a.records.size(), 5u);
  const auto metrics = read_csv(root / "a" / "compute" / "metrics.csv");
  EXPECT_EQ(metrics.header, kMetricsHeader);
  EXPECT_EQ(metrics.rows.size(), 5u * 2 * 2);  // checkpoints x tasks x modes (one seed)
  EXPECT_EQ(read_csv(root / "a" / "compute" / "records.csv").rows.size(), 5u);
  EXPECT_EQ(read_csv(root / "a" / "compute" / "pca.csv").rows.size(), 5u + 5u * 2);

  ASSERT_EQ(a.manifest.files.size(), b.manifest.files.size());
  for (std::size_t i = 0; i < a.manifest.files.size(); ++i) {
    EXPECT_EQ(a.manifest.files[i].path, b.manifest.files[i].path);
    if (a.manifest.files[i].path == "config.json") continue;  // records the worker count
    EXPECT_EQ(a.manifest.files[i].sha256, b.manifest.files[i].sha256) << a.manifest.files[i].path;
  }
  EXPECT_TRUE(verify_manifest(root / "a").empty());
  EXPECT_EQ(a.manifest.checkpoints.size(), 5u + 5u * 2);
  fs::remove_all(root);
}

TEST(Pipeline, ModelAndDataAxes) {
  const auto root = scratch("axes");
  const auto config = load_run_config(fs::path(CLM_SOURCE_DIR) / "configs" / "micro.json", {});
  const auto m = run_pipeline(config, Axis::model, root);
  EXPECT_EQ(m.records.size(), 3u);
  const auto pts = parse_scaling_points(read_csv(root / "model" / "scaling_points.csv"));
  ASSERT_EQ(pts.size(), 3u);
  EXPECT_LT(pts[0].n, pts[1].n);
  EXPECT_LT(pts[1].n, pts[2].n);

  const auto d = run_pipeline(config, Axis::data, root);
  EXPECT_EQ(d.records.size(), 3u);
  const auto dp = parse_scaling_points(read_csv(root / "data" / "scaling_points.csv"));
  ASSERT_EQ(dp.size(), 3u);
  EXPECT_LT(dp[0].d, dp[1].d);
  EXPECT_LT(dp[1].d, dp[2].d);
  EXPECT_EQ(read_csv(root / "data" / "consistency.csv").rows.size(), 2u * 3u);
  EXPECT_TRUE(verify_manifest(root).empty());
  EXPECT_EQ(read_manifest(root).size(), 2u);
  fs::remove_all(root);
}

TEST(Pipeline, RejectsOversizedTraceSample) {
  auto config = load_run_config(fs::path(CLM_SOURCE_DIR) / "configs" / "micro.json", {"metrics.hutchinson_sequences=100000"});
  const auto root = scratch("over");
  EXPECT_THROW(run_pipeline(config, Axis::compute, root), std::invalid_argument);
  fs::remove_all(root);
}
