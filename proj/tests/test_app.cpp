#include <gtest/gtest.h>

#include <cstdio>
#include <fstream>
#include <set>
#include <sys/wait.h>

#include <json.hpp>

#include "hyperrag/app.hpp"
#include "hyperrag/kv_server.hpp"
#include "test_util.hpp"

using namespace hyperrag;
using testutil::code_of;
using testutil::TempDir;
namespace fs = std::filesystem;

namespace {

app::BuildOptions small_build() {
  app::BuildOptions o;
  o.model.layers = 2;
  o.model.model_dim = 64;
  o.model.heads = 4;
  o.model.kv_heads = 2;
  o.model.head_dim = 16;
  o.model.vocab_size = 512;
  o.model.max_position = 128;
  o.model.seed = 7;
  o.layout = LayoutConfig{64, 16, 0};
  o.nlist = 8;
  o.num_shards = 4;
  o.seed = 3;
  return o;
}

std::size_t count_lines(const fs::path& p) {
  const auto s = testutil::read_file(p);
  return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n'));
}

std::size_t count_words(const std::string& s) {
  std::istringstream in(s);
  std::size_t n = 0;
  for (std::string w; in >> w;) ++n;
  return n;
}

// A built directory over 60 small documents, shared by the read-only tests.
const fs::path& built_dir() {
  static TempDir dir("built");
  static const bool once = [] {
    app::cmd_gen_corpus(60, 50, 11, dir.path() / "corpus.in.jsonl");
    app::cmd_build(dir.path() / "corpus.in.jsonl", dir.path() / "out", small_build());
    return true;
  }();
  (void)once;
  static const fs::path out = dir.path() / "out";
  return out;
}

struct RunResult {
  int exit_code = -1;
  std::string out;
};

RunResult run_cli(const std::string& args) {
  const std::string cmd = std::string(HYPERRAG_CLI) + " " + args + " 2>/dev/null";
  RunResult r;
  FILE* p = ::popen(cmd.c_str(), "r");
  if (!p) return r;
  char buf[4096];
  for (std::size_t n; (n = std::fread(buf, 1, sizeof buf, p)) > 0;) r.out.append(buf, n);
  const int status = ::pclose(p);
  r.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

}  // namespace

TEST(GenCorpus, CountsWordsAndDeterminism) {
  TempDir dir("gen");
  app::cmd_gen_corpus(10, 200, 42, dir.path() / "a.jsonl");
  app::cmd_gen_corpus(10, 200, 42, dir.path() / "b.jsonl");
  app::cmd_gen_corpus(10, 200, 43, dir.path() / "c.jsonl");
  EXPECT_EQ(count_lines(dir.path() / "a.jsonl"), 10u);
  EXPECT_EQ(testutil::read_file(dir.path() / "a.jsonl"), testutil::read_file(dir.path() / "b.jsonl"));
  EXPECT_NE(testutil::read_file(dir.path() / "a.jsonl"), testutil::read_file(dir.path() / "c.jsonl"));
  const auto docs = read_corpus(dir.path() / "a.jsonl");
  std::set<std::string> ids;
  for (const auto& d : docs) {
    EXPECT_EQ(count_words(d.text), 200u);
    ids.insert(d.id);
  }
  EXPECT_EQ(ids.size(), 10u);
  EXPECT_EQ(code_of([&] { app::cmd_gen_corpus(0, 5, 1, dir.path() / "z.jsonl"); }), ErrorCode::kUsage);
  EXPECT_EQ(code_of([] { app::cmd_gen_corpus(2, 5, 1, "/nonexistent-dir/x/y.jsonl"); }), ErrorCode::kIo);
}

TEST(GenCorpus, WordListAndWorkload) {
  const auto& words = app::word_list();
  EXPECT_GE(words.size(), 256u);
  EXPECT_EQ(std::set<std::string>(words.begin(), words.end()).size(), words.size());
  const auto docs = app::generate_corpus(20, 40, 1);
  const auto qs = app::generate_workload(docs, 30, 8, 2);
  ASSERT_EQ(qs.size(), 30u);
  for (const auto& q : qs) {
    EXPECT_EQ(count_words(q.question), 8u);
    bool found = false;
    for (const auto& d : docs) found = found || d.text.find(q.question) != std::string::npos;
    EXPECT_TRUE(found) << q.question;
  }
  EXPECT_EQ(app::generate_workload(docs, 30, 8, 2), qs);
}

TEST(Build, ManifestMatchesCorpusAndFormula) {
  const auto m = app::Manifest::load(built_dir());
  EXPECT_EQ(m.entries.size(), 60u);
  EXPECT_EQ(count_lines(built_dir() / "corpus.jsonl"), 60u);
  // layers * {K,V} * kv_heads * document_len * head_dim * 4 bytes
  EXPECT_EQ(m.payload_bytes, 2u * 2 * 2 * 64 * 16 * 4);
  std::uint64_t total = 0;
  for (const auto& e : m.entries) {
    total += e.bytes;
    EXPECT_EQ(e.shard, shard_of(e.centroid, 4));
    EXPECT_TRUE(fs::exists(built_dir() / "kv" / ("shard" + std::to_string(e.shard)) / (e.chunk_id + ".hrkv")));
  }
  EXPECT_EQ(total, m.total_entry_bytes);
  EXPECT_EQ(app::Manifest::from_json(m.to_json()).to_json(), m.to_json());
}

TEST(Build, DeterministicAcrossRebuilds) {
  TempDir dir("rebuild");
  app::cmd_build(built_dir() / "corpus.jsonl", dir.path() / "again", small_build());
  EXPECT_EQ(testutil::read_file(dir.path() / "again" / "index.hriv"), testutil::read_file(built_dir() / "index.hriv"));
  EXPECT_EQ(testutil::read_file(dir.path() / "again" / "manifest.json"),
            testutil::read_file(built_dir() / "manifest.json"));
  std::size_t compared = 0;
  for (const auto& e : fs::recursive_directory_iterator(built_dir() / "kv")) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), built_dir());
    EXPECT_EQ(testutil::read_file(dir.path() / "again" / rel), testutil::read_file(e.path())) << rel;
    ++compared;
  }
  EXPECT_EQ(compared, 60u);
}

TEST(Build, FailuresNameTheChunk) {
  TempDir dir("badbuild");
  auto docs = app::generate_corpus(12, 20, 1);
  docs.push_back(docs[4]);
  write_corpus(dir.path() / "dup.jsonl", docs);
  try {
    app::cmd_build(dir.path() / "dup.jsonl", dir.path() / "out", small_build());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kDuplicate);
    EXPECT_NE(std::string(e.what()).find(docs[4].id), std::string::npos) << e.what();
  }
  write_corpus(dir.path() / "empty.jsonl", std::vector<Document>{});
  EXPECT_EQ(code_of([&] { app::cmd_build(dir.path() / "empty.jsonl", dir.path() / "o2", small_build()); }),
            ErrorCode::kUsage);
}

TEST(Verify, FreshBuildPasses) {
  const auto rep = app::cmd_verify(built_dir(), 60, 1);
  EXPECT_TRUE(rep.ok()) << (rep.failures.empty() ? "" : rep.failures.front());
  EXPECT_EQ(rep.entries_checked, 60u);
  EXPECT_EQ(rep.lossless_pairs, 60u);
  EXPECT_EQ(rep.locality_queries, 60u);
  EXPECT_GT(rep.reencoded, 0u);
}

TEST(Verify, PassesAgainstServedStore) {
  KvServer server(std::make_shared<DirectoryBackend>(built_dir() / "kv"));
  server.start("127.0.0.1:0");
  const auto rep = app::cmd_verify(built_dir(), 30, 2, "tcp://" + server.address());
  EXPECT_TRUE(rep.ok()) << (rep.failures.empty() ? "" : rep.failures.front());
  server.stop();
}

TEST(Verify, CorruptedEntryIsNamed) {
  TempDir dir("corrupt");
  fs::copy(built_dir(), dir.path() / "b", fs::copy_options::recursive);
  const auto m = app::Manifest::load(dir.path() / "b");
  const auto& victim = m.entries[7];
  const auto file = dir.path() / "b" / "kv" / ("shard" + std::to_string(victim.shard)) / (victim.chunk_id + ".hrkv");
  {
    std::fstream f(file, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(-5, std::ios::end);
    f.put('\x7f');
  }
  const auto rep = app::cmd_verify(dir.path() / "b", 20, 1);
  ASSERT_FALSE(rep.ok());
  bool named = false;
  for (const auto& f : rep.failures) named = named || f.find("'" + victim.chunk_id + "'") != std::string::npos;
  EXPECT_TRUE(named) << rep.failures.front();
}

TEST(Verify, UsageErrors) {
  EXPECT_EQ(code_of([] { app::cmd_verify(built_dir(), 0, 1); }), ErrorCode::kUsage);
  TempDir empty("empty-built");
  EXPECT_EQ(code_of([&] { app::cmd_verify(empty.path(), 5, 1); }), ErrorCode::kUsage);
}

TEST(Bench, SweepCounterColumns) {
  app::BenchSpec spec;
  spec.document_lens = {32, 64};
  spec.query_len = 16;
  spec.batch_sizes = {1, 4};
  spec.repetitions = 2;
  const auto rows = app::run_sweep(small_build().model, spec);
  ASSERT_EQ(rows.size(), 2u * 2 * 2);
  for (const auto& r : rows) {
    const std::uint64_t t = r.document_len + 16;
    EXPECT_GT(r.mean_latency_ms, 0.0);
    EXPECT_GT(r.pairs_per_s, 0.0);
    if (r.mode == ScoreMode::kFull) {
      EXPECT_EQ(r.counters.linear_token_count, r.batch * t);
      EXPECT_EQ(r.counters.attn_mac_pairs, r.batch * t * (t + 1) / 2);
      EXPECT_EQ(r.linear_ratio, 1.0);
    } else {
      EXPECT_EQ(r.counters.linear_token_count, r.batch * 16);
      EXPECT_EQ(r.counters.attn_mac_pairs, r.batch * (16 * r.document_len + 16 * 17 / 2));
      EXPECT_DOUBLE_EQ(r.linear_ratio, 16.0 / double(t));
      EXPECT_DOUBLE_EQ(r.peak_ratio, 16.0 / double(t));
    }
  }
}

TEST(Bench, DefaultModelLinearRatioAtD256) {
  app::BenchSpec spec;
  spec.document_lens = {256};
  spec.batch_sizes = {1};
  spec.repetitions = 1;
  spec.warmup = 0;
  const auto rows = app::run_sweep(ModelConfig{}, spec);
  for (const auto& r : rows) {
    if (r.mode != ScoreMode::kReuse) continue;
    EXPECT_EQ(r.linear_ratio, 48.0 / 304.0);
    EXPECT_EQ(r.counters.attn_mac_pairs, 13464u);
  }
}

TEST(Bench, WritesReportsAndRejectsMismatch) {
  TempDir dir("bench");
  const auto docs = read_corpus(built_dir() / "corpus.jsonl");
  write_workload(dir.path() / "w.jsonl", app::generate_workload(docs, 12, 8, 1));
  app::BenchSpec spec;
  spec.document_lens = {64};
  spec.query_len = 16;
  spec.batch_sizes = {2};
  spec.repetitions = 1;
  spec.pipeline_queries = 12;
  spec.pipeline_warmup = 2;
  const auto rep = app::cmd_bench(built_dir(), spec, dir.path() / "w.jsonl", dir.path() / "r");
  EXPECT_EQ(rep.sweep.size(), 2u);
  ASSERT_EQ(rep.pipeline.size(), 2u);
  EXPECT_EQ(rep.pipeline[0].queries, 10u);
  EXPECT_EQ(count_lines(dir.path() / "r" / "sweep.csv"), 3u);
  EXPECT_EQ(count_lines(dir.path() / "r" / "pipeline.csv"), 3u);
  EXPECT_TRUE(nlohmann::json::accept(testutil::read_file(dir.path() / "r" / "report.json")));

  auto bad = spec;
  bad.query_len = 48;
  EXPECT_EQ(code_of([&] { app::cmd_bench(built_dir(), bad, dir.path() / "w.jsonl", dir.path() / "r2"); }),
            ErrorCode::kUsage);
  bad = spec;
  bad.document_lens = {128};
  EXPECT_EQ(code_of([&] { app::cmd_bench(built_dir(), bad, dir.path() / "w.jsonl", dir.path() / "r3"); }),
            ErrorCode::kUsage);
  bad = spec;
  bad.batch_sizes = {};
  EXPECT_EQ(code_of([&] { bad.validate(); }), ErrorCode::kUsage);
}

TEST(Query, OneShotResponse) {
  PipelineConfig pc;
  pc.layout = LayoutConfig{64, 16, 0};
  pc.retrieve_k = 5;
  pc.keep_m = 2;
  const auto docs = read_corpus(built_dir() / "corpus.jsonl");
  const auto r = app::cmd_query(built_dir(), docs[3].text, pc);
  EXPECT_EQ(r.selected.size(), 2u);
  const auto j = nlohmann::json::parse(app::response_to_json(r));
  EXPECT_EQ(j["selected"].size(), 2u);
  EXPECT_EQ(j["prompt"], r.prompt);
}

TEST(Config, OverridesAndUnknownKeys) {
  TempDir dir("config");
  {
    std::ofstream f(dir.path() / "ok.json");
    f << R"({"model": {"layers": 3}, "layout": {"document_len": 128}, "pipeline": {"retrieve_k": 5, "rerank_mode": "full", "max_wait_ms": 2.5}, "build": {"nlist": 16}})";
  }
  app::Overrides o;
  app::apply_config_file(dir.path() / "ok.json", o);
  EXPECT_EQ(o.model.layers, 3u);
  EXPECT_EQ(o.layout.document_len, 128u);
  EXPECT_EQ(o.pipeline.layout.document_len, 128u);
  EXPECT_EQ(o.pipeline.retrieve_k, 5u);
  EXPECT_EQ(o.pipeline.rerank_mode, ScoreMode::kFull);
  EXPECT_EQ(o.pipeline.max_wait.count(), 2500);
  EXPECT_EQ(o.nlist, 16u);
  for (const char* bad : {R"({"model": {"layerz": 3}})", R"({"extra": 1})", R"({"pipeline": {"rerank_mode": "fast"}})",
                          "not json", R"({"model": {"layers": "three"}})"}) {
    {
      std::ofstream f(dir.path() / "bad.json");
      f << bad;
    }
    app::Overrides x;
    EXPECT_EQ(code_of([&] { app::apply_config_file(dir.path() / "bad.json", x); }), ErrorCode::kInvalidConfig) << bad;
  }
}

TEST(Cli, ExitCodesAndOutputs) {
  TempDir dir("cli");
  const auto corpus = (dir.path() / "c.jsonl").string();
  auto r = run_cli("gen-corpus --count 10 --words-per-doc 200 --seed 4 --out " + corpus);
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(count_lines(corpus), 10u);
  r = run_cli("gen-corpus --count 10 --seed 4 --out /nonexistent-dir/q/c.jsonl");
  EXPECT_EQ(r.exit_code, 3);
  r = run_cli("verify --built " + built_dir().string() + " --trials 0");
  EXPECT_EQ(r.exit_code, 2);
  r = run_cli("verify --built " + built_dir().string() + " --trials 10 --format csv");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(r.out.rfind("ok,trials,", 0), 0u);
  EXPECT_NE(r.out.find("\ntrue,10,"), std::string::npos) << r.out;
  r = run_cli("bogus-verb");
  EXPECT_EQ(r.exit_code, 2);
  // The query verb takes the layout from the build it reads.
  r = run_cli("query --built " + built_dir().string() + " --question 'alpha beta' --retrieve-k 4 --keep-m 1");
  EXPECT_EQ(r.exit_code, 0);
  EXPECT_EQ(nlohmann::json::parse(r.out)["selected"].size(), 1u);
}
