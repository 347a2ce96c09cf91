// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "hyperrag/app.hpp"
#include "hyperrag/kv_server.hpp"
#include "raw_socket.hpp"
#include "test_util.hpp"
#include "world.hpp"

using namespace hyperrag;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

bool same_bits(float a, float b) { return std::bit_cast<std::uint32_t>(a) == std::bit_cast<std::uint32_t>(b); }

// Query of `len` slots: first token real, then a mix of interior pads and an
// optional padded tail.
std::vector<TokenId> random_query(std::size_t len, std::size_t vocab, SplitMix64& rng) {
  auto q = testutil::random_tokens(len, vocab, rng.next());
  const std::size_t valid = rng.next_below(2) ? len : 1 + rng.next_below(len);
  for (std::size_t i = 1; i < len; ++i)
    if (i >= valid || rng.next_below(5) == 0) q[i] = 0;
  return q;
}

std::vector<TokenId> random_doc(std::size_t len, std::size_t vocab, SplitMix64& rng) {
  const std::size_t valid = rng.next_below(3) == 0 ? len : 1 + rng.next_below(len);
  return testutil::padded_tokens(len, valid, vocab, rng.next());
}

// ---- shared build for the pipeline criteria ----

const testutil::World& default_world() {
  static const testutil::World w = [] {
    testutil::WorldOptions o;
    o.layout = LayoutConfig{256, 48, 0};
    o.docs = 400;
    o.words_per_doc = 200;
    o.nlist = 32;
    o.num_shards = 4;
    o.seed = 17;
    return testutil::make_world(o);
  }();
  return w;
}

PipelineConfig default_pipeline(ScoreMode mode) {
  PipelineConfig c;
  c.layout = LayoutConfig{256, 48, 0};
  c.rerank_mode = mode;
  c.max_batch = 8;
  c.rerank_workers = 2;
  return c;
}

// ---- criteria ----

Outcome ac1_lossless() {
  const auto& w = testutil::default_weights();
  const std::size_t vocab = w->config.vocab_size;
  std::size_t pairs = 0, mismatches = 0, padded_docs = 0, padded_queries = 0;
  std::string first_bad;
  for (std::size_t d : {256, 512}) {
    Reranker ref(w, LayoutConfig{d, 48, 0}, KernelPath::kReference);
    SplitMix64 rng(1000 + d);
    for (std::size_t doc_i = 0; doc_i < 250; ++doc_i) {
      const auto doc = random_doc(d, vocab, rng);
      padded_docs += doc.back() == 0;
      const DocKV kv = ref.doc_prefill("doc-" + std::to_string(doc_i), doc);
      const DocKV stored = decode_entry(encode_entry(kv, QuantScheme::kF32));
      if (!(stored == kv)) ++mismatches;
      for (int qi = 0; qi < 2; ++qi) {
        const auto q = random_query(48, vocab, rng);
        padded_queries += std::count(q.begin(), q.end(), 0u) > 0;
        const float full = ref.score_full(doc, q).score;
        const float reuse = ref.score_reuse(stored, q).score;
        ++pairs;
        if (!same_bits(full, reuse)) {
          ++mismatches;
          if (first_bad.empty()) first_bad = fmt(" first at D=%zu doc %zu: %a vs %a", d, doc_i, full, reuse);
        }
      }
    }
  }
  return {pairs >= 1000 && mismatches == 0,
          fmt("%zu reference-path pairs at D in {256,512}, Q=48 (%zu padded docs, %zu padded queries); "
              "%zu bitwise mismatches",
              pairs, padded_docs, padded_queries, mismatches) +
              first_bad};
}

Outcome ac2_end_to_end() {
  const auto& w = default_world();
  const auto qs = app::generate_workload(w.res.corpus, 500, 12, 23);
  auto cfg_full = default_pipeline(ScoreMode::kFull);
  auto cfg_reuse = default_pipeline(ScoreMode::kReuse);
  for (auto* c : {&cfg_full, &cfg_reuse}) {
    c->retrieve_k = 5;
    c->keep_m = 2;
  }
  const auto full = Pipeline(w.res, cfg_full).run_workload(qs, 0);
  const auto reuse = Pipeline(w.res, cfg_reuse).run_workload(qs, 0);
  std::size_t id_mismatch = 0, score_mismatch = 0, selected = 0;
  for (std::size_t i = 0; i < qs.size(); ++i) {
    const auto& a = full.responses[i].selected;
    const auto& b = reuse.responses[i].selected;
    selected += a.size();
    if (a.size() != b.size()) {
      ++id_mismatch;
      continue;
    }
    bool ids = true;
    for (std::size_t k = 0; k < a.size(); ++k) {
      ids = ids && a[k].chunk_id == b[k].chunk_id;
      score_mismatch += !same_bits(a[k].score, b[k].score);
    }
    id_mismatch += !ids;
  }
  return {id_mismatch == 0 && full.responses.size() == 500 && reuse.metrics.cache_misses == 0,
          fmt("500 queries, retrieve_k=5 keep_m=2, %zu chunks selected; %zu queries with differing ids, "
              "%zu differing scores",
              selected, id_mismatch, score_mismatch)};
}

Outcome ac3_counters() {
  Reranker rr(testutil::default_weights(), LayoutConfig{256, 48, 0});
  const auto doc = testutil::random_tokens(256, 32768, 5);
  const auto q = testutil::random_tokens(48, 32768, 6);
  const auto full = rr.score_full(doc, q).counters;
  const auto reuse = rr.score_reuse(rr.doc_prefill("d", doc), q).counters;
  // Enumeration: every (row, key) pair with both tokens real, causal.
  std::vector<TokenId> seq = doc;
  seq.insert(seq.end(), q.begin(), q.end());
  std::uint64_t enum_full = 0, enum_reuse = 0;
  for (std::size_t i = 0; i < seq.size(); ++i)
    for (std::size_t j = 0; j <= i; ++j)
      if (seq[i] != 0 && seq[j] != 0) {
        ++enum_full;
        enum_reuse += i >= 256;
      }
  const bool linear_ok = full.linear_token_count == 304 && reuse.linear_token_count == 48 &&
                         reuse.linear_token_count * 304 == full.linear_token_count * 48;
  const bool attn_ok = full.attn_mac_pairs == 46360 && reuse.attn_mac_pairs == 13464 &&
                       causal_pairs(304) == 46360 && reuse_pairs(256, 48) == 13464 && enum_full == 46360 &&
                       enum_reuse == 13464;
  const bool peak_ok = full.peak_activation_tokens == 304 && reuse.peak_activation_tokens == 48;
  return {linear_ok && attn_ok && peak_ok,
          fmt("linear %llu/%llu, attn %llu/%llu (ratio %.4f, enumerated %llu/%llu), peak %llu/%llu",
              (unsigned long long)reuse.linear_token_count, (unsigned long long)full.linear_token_count,
              (unsigned long long)reuse.attn_mac_pairs, (unsigned long long)full.attn_mac_pairs,
              double(reuse.attn_mac_pairs) / double(full.attn_mac_pairs), (unsigned long long)enum_reuse,
              (unsigned long long)enum_full, (unsigned long long)reuse.peak_activation_tokens,
              (unsigned long long)full.peak_activation_tokens)};
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

Outcome ac4_throughput() {
  const auto& w = default_world();
  const auto qs = app::generate_workload(w.res.corpus, 24, 12, 31);
  std::vector<double> full_qps, reuse_qps;
  for (int run = 0; run < 3; ++run) {
    full_qps.push_back(Pipeline(w.res, default_pipeline(ScoreMode::kFull)).run_workload(qs, 4).metrics.throughput_qps);
    reuse_qps.push_back(
        Pipeline(w.res, default_pipeline(ScoreMode::kReuse)).run_workload(qs, 4).metrics.throughput_qps);
  }
  const double ratio = median(reuse_qps) / median(full_qps);

  app::BenchSpec spec;
  spec.document_lens = {64, 128, 256, 512};
  spec.batch_sizes = {8};
  spec.repetitions = 3;
  spec.warmup = 1;
  std::map<std::pair<std::size_t, ScoreMode>, std::vector<double>> lat;
  for (int run = 0; run < 3; ++run)
    for (const auto& r : app::run_sweep(ModelConfig{}, spec)) lat[{r.document_len, r.mode}].push_back(r.mean_latency_ms);
  auto med = [&](std::size_t d, ScoreMode m) { return median(lat[{d, m}]); };
  const double full_growth = med(512, ScoreMode::kFull) / med(256, ScoreMode::kFull);
  const double reuse_growth = med(512, ScoreMode::kReuse) / med(256, ScoreMode::kReuse);
  bool full_increasing = true;
  for (std::size_t i = 1; i < spec.document_lens.size(); ++i)
    full_increasing = full_increasing && med(spec.document_lens[i], ScoreMode::kFull) >
                                             med(spec.document_lens[i - 1], ScoreMode::kFull);
  return {ratio >= 2.0 && full_growth >= 1.5 && reuse_growth <= 1.3,
          fmt("throughput reuse %.2f qps vs full %.2f qps = %.2fx (>= 2.0); D 256->512 latency full x%.2f (>= 1.5), "
              "reuse x%.2f (<= 1.3); full latency by D %.1f/%.1f/%.1f/%.1f ms%s; %u hardware threads",
              median(reuse_qps), median(full_qps), ratio, full_growth, reuse_growth, med(64, ScoreMode::kFull),
              med(128, ScoreMode::kFull), med(256, ScoreMode::kFull), med(512, ScoreMode::kFull),
              full_increasing ? " (increasing)" : " (NOT increasing)", std::thread::hardware_concurrency())};
}

Outcome ac5_quantization() {
  // Hard: elementwise bound over 10^5 elements.
  const std::size_t heads = 10, tokens = 625, channels = 16;
  auto t = testutil::random_floats(heads * tokens * channels, 77, -3.0f, 3.0f);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] *= std::pow(10.0f, float(i % channels) / 5.0f - 1.5f);
  const auto q = quantize_tensor(t, heads, tokens, channels, QuantScheme::kInt8PerChannel);
  const auto back = dequantize_tensor(q.codes, q.scales, heads, tokens, channels, QuantScheme::kInt8PerChannel);
  std::size_t violations = 0;
  for (std::size_t e = 0; e < t.size(); ++e) {
    const std::size_t h = e / (tokens * channels), c = e % channels;
    const double scale = q.scales[h * channels + c];
    if (std::fabs(double(t[e]) - back[e]) > scale / 2 * (1 + 1e-6)) ++violations;
  }

  // Hard: payload size.
  const auto& w = testutil::default_weights();
  Reranker rr(w, LayoutConfig{256, 48, 0});
  SplitMix64 rng(55);
  std::vector<DocKV> f32, int8;
  for (std::size_t i = 0; i < 300; ++i) {
    const auto kv = rr.doc_prefill("c" + std::to_string(i), random_doc(256, w->config.vocab_size, rng));
    f32.push_back(kv);
    int8.push_back(decode_entry(encode_entry(kv, QuantScheme::kInt8PerChannel)));
  }
  const auto h32 = read_entry_header(encode_entry(f32[0], QuantScheme::kF32));
  const auto h8 = read_entry_header(encode_entry(f32[0], QuantScheme::kInt8PerChannel));
  const bool quarter = h8.payload_bytes() * 4 == h32.payload_bytes();

  // Soft: top-1 agreement over 200 candidate sets of 10.
  std::size_t agree = 0;
  for (std::size_t s = 0; s < 200; ++s) {
    const auto query = random_query(48, w->config.vocab_size, rng);
    std::size_t best32 = 0, best8 = 0;
    float s32 = -INFINITY, s8 = -INFINITY;
    for (std::size_t k = 0; k < 10; ++k) {
      const std::size_t d = rng.next_below(f32.size());
      const float a = rr.score_reuse(f32[d], query).score;
      const float b = rr.score_reuse(int8[d], query).score;
      if (a > s32) s32 = a, best32 = d;
      if (b > s8) s8 = b, best8 = d;
    }
    agree += best32 == best8;
  }
  const double agreement = double(agree) / 200.0;
  return {violations == 0 && quarter,
          fmt("bound violations %zu / 100000; int8 payload %zu B vs f32 %zu B%s; top-1 agreement %.1f%% "
              "(soft target 95%%%s)",
              violations, h8.payload_bytes(), h32.payload_bytes(), quarter ? " (exactly 1/4)" : " (NOT 1/4)",
              100.0 * agreement, agreement >= 0.95 ? ", met" : ", NOT met")};
}

Outcome ac6_ivf() {
  const std::size_t dim = 32, clusters = 64, per = 30;
  SplitMix64 rng(91);
  Matrix m{clusters * per, dim, std::vector<float>(clusters * per * dim)};
  std::vector<float> centers(clusters * dim);
  for (auto& x : centers) x = 2.0f * rng.next_unit_float() - 1.0f;
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < dim; ++j)
      m.data[i * dim + j] = centers[(i / per) * dim + j] + 0.35f * (2.0f * rng.next_unit_float() - 1.0f);
  auto idx = IvfIndex::train(m, 64, 10, 4);
  std::vector<IndexedVector> corpus;
  for (std::size_t i = 0; i < m.rows; ++i) {
    const std::string id = "v" + std::to_string(i);
    idx.add(id, m.row(i));
    corpus.push_back({id, l2_normalized(m.row(i))});
  }
  std::size_t mismatches = 0;
  for (std::uint64_t qi = 0; qi < 1000; ++qi) {
    const auto qv = testutil::random_floats(dim, 5000 + qi);
    const std::size_t k = 1 + qi % 30;
    const auto a = idx.search(qv, k, 64);
    const auto b = brute_force_search(corpus, qv, k);
    bool same = a.size() == b.size();
    for (std::size_t i = 0; same && i < a.size(); ++i)
      same = a[i].chunk_id == b[i].chunk_id && same_bits(a[i].similarity, b[i].similarity);
    mismatches += !same;
  }
  std::vector<double> recall;
  for (std::size_t nprobe : {1, 2, 4, 8, 16}) {
    double sum = 0;
    for (std::uint64_t qi = 0; qi < 500; ++qi) {
      // Queries near the data: a stored vector plus noise.
      auto qv = testutil::random_floats(dim, 9000 + qi, -0.3f, 0.3f);
      const auto base = m.row((qi * 37) % m.rows);
      for (std::size_t j = 0; j < dim; ++j) qv[j] += base[j];
      std::set<std::string> truth;
      for (const auto& c : brute_force_search(corpus, qv, 10)) truth.insert(c.chunk_id);
      std::size_t hit = 0;
      for (const auto& c : idx.search(qv, 10, nprobe)) hit += truth.count(c.chunk_id);
      sum += double(hit) / 10.0;
    }
    recall.push_back(sum / 500.0);
  }
  bool monotone = true;
  for (std::size_t i = 1; i < recall.size(); ++i) monotone = monotone && recall[i] >= recall[i - 1];
  return {mismatches == 0 && monotone,
          fmt("1000 queries at nprobe=nlist=64: %zu differ from brute force; recall@10 at nprobe 1/2/4/8/16 = "
              "%.3f/%.3f/%.3f/%.3f/%.3f%s",
              mismatches, recall[0], recall[1], recall[2], recall[3], recall[4],
              monotone ? " (nondecreasing)" : " (NOT monotone)")};
}

Outcome ac7_locality() {
  const auto& w = default_world();
  const auto qs = app::generate_workload(w.res.corpus, 1000, 12, 71);
  std::size_t violations = 0, empty = 0;
  std::string hist;
  for (std::size_t nprobe : {1, 2, 4, 8}) {
    auto cfg = default_pipeline(ScoreMode::kReuse);
    cfg.nprobe = nprobe;
    Pipeline p(w.res, cfg);
    std::map<std::size_t, std::size_t> h;
    for (const auto& q : qs) {
      Pipeline::Job job;
      job.query_id = q.id;
      job.question = q.question;
      p.retrieve(job);
      p.fetch(job);
      const std::size_t s = job.response.shards_touched;
      ++h[s];
      if (job.candidates.empty()) {
        ++empty;
        continue;
      }
      if (s > nprobe || s == 0 || (nprobe == 1 && s != 1)) ++violations;
    }
    hist += fmt(" nprobe=%zu max=%zu;", nprobe, h.rbegin()->first);
  }
  return {violations == 0, fmt("1000 queries x nprobe {1,2,4,8}: %zu violations, %zu queries without candidates;",
                               violations, empty) +
                               hist};
}

std::string backend_transcript(Backend& b) {
  std::ostringstream log;
  auto show = [](const std::optional<Bytes>& v) {
    return v ? std::to_string(v->size()) + ":" + std::to_string(fnv1a64(std::string(v->begin(), v->end())))
             : std::string("-");
  };
  log << show(b.get("absent")) << b.exists("absent");
  for (int i = 0; i < 40; ++i) {
    const std::string k = "k/" + std::to_string(i % 25) + (i % 3 ? "" : " x");
    Bytes v(static_cast<std::size_t>(i * 97));
    SplitMix64 r(i);
    for (auto& x : v) x = static_cast<std::uint8_t>(r.next());
    b.put(k, v);
    log << show(b.get(k)) << b.exists(k) << ';';
  }
  const auto s = b.stats(), p = b.stats("k/1");
  log << s.entries << ' ' << s.bytes << ' ' << p.entries << ' ' << p.bytes;
  return log.str();
}

Outcome ac8_backends() {
  std::vector<std::string> notes;
  bool ok = true;

  // Backend property transcript.
  testutil::TempDir tdir("acc-backends");
  std::vector<std::string> transcripts;
  {
    MemoryBackend mem;
    DirectoryBackend dir(tdir.path() / "d");
    transcripts.push_back(backend_transcript(mem));
    transcripts.push_back(backend_transcript(dir));
    KvServer s1(std::make_shared<MemoryBackend>()), s2(std::make_shared<DirectoryBackend>(tdir.path() / "r"));
    s1.start("127.0.0.1:0");
    s2.start("127.0.0.1:0");
    RemoteBackend r1(std::make_shared<RemoteClient>(s1.address()), "");
    RemoteBackend r2(std::make_shared<RemoteClient>(s2.address()), "");
    transcripts.push_back(backend_transcript(r1));
    transcripts.push_back(backend_transcript(r2));
    s1.stop();
    s2.stop();
  }
  const bool same_transcripts = std::all_of(transcripts.begin(), transcripts.end(),
                                            [&](const std::string& t) { return t == transcripts[0]; });
  ok = ok && same_transcripts;
  notes.push_back(same_transcripts ? "property suite identical on 4 backends" : "property suites DIFFER");

  // Verification suite over one build, three ways.
  app::BuildOptions bo;
  bo.nlist = 8;
  bo.seed = 2;
  app::cmd_gen_corpus(80, 200, 8, tdir.path() / "c.jsonl");
  const auto built = tdir.path() / "built";
  app::cmd_build(tdir.path() / "c.jsonl", built, bo);
  auto mem = std::make_shared<MemoryBackend>();
  for (const auto& e : fs::recursive_directory_iterator(built / "kv")) {
    if (!e.is_regular_file()) continue;
    auto key = fs::relative(e.path(), built / "kv").replace_extension().generic_string();
    const auto bytes = testutil::read_file(e.path());
    mem->put(key, Bytes(bytes.begin(), bytes.end()));
  }
  KvServer dir_server(std::make_shared<DirectoryBackend>(built / "kv")), mem_server(mem);
  dir_server.start("127.0.0.1:0");
  mem_server.start("127.0.0.1:0");
  const auto local = app::cmd_verify(built, 40, 3);
  const auto remote_dir = app::cmd_verify(built, 40, 3, "tcp://" + dir_server.address());
  const auto remote_mem = app::cmd_verify(built, 40, 3, "tcp://" + mem_server.address());
  const bool verify_ok = local.ok() && remote_dir.ok() && remote_mem.ok() && local.to_json() == remote_dir.to_json() &&
                         local.to_json() == remote_mem.to_json();
  ok = ok && verify_ok;
  notes.push_back(fmt("verify (40 trials, 80 entries) on directory/remote-directory/remote-memory: %s",
                      verify_ok ? "identical passes" : "FAILED or differs"));

  // 1000 random entries through the wire.
  std::size_t wire_bad = 0;
  {
    RemoteClient c(mem_server.address());
    SplitMix64 rng(12);
    std::vector<std::pair<std::string, Bytes>> kvs;
    for (int i = 0; i < 1000; ++i) {
      Bytes v(rng.next_below(8) == 0 ? rng.next_below(300000) : rng.next_below(3000));
      for (auto& x : v) x = static_cast<std::uint8_t>(rng.next());
      kvs.emplace_back("wire/" + std::to_string(rng.next()), std::move(v));
      c.put(kvs.back().first, kvs.back().second);
    }
    for (const auto& [k, v] : kvs) wire_bad += c.get(k) != v;
  }
  ok = ok && wire_bad == 0;
  notes.push_back(fmt("wire roundtrip 1000 entries: %zu mismatches", wire_bad));

  // Rogue clients.
  std::size_t responses = 0, frames = 0;
  SplitMix64 rng(404);
  for (int conn = 0; conn < 20; ++conn) {
    testutil::RawSocket s(mem_server.port());
    for (int f = 0; f < 15; ++f) {
      Bytes body(rng.next_below(40));
      for (auto& x : body) x = static_cast<std::uint8_t>(rng.next());
      if (!body.empty() && rng.next_below(2)) body[0] = static_cast<std::uint8_t>(5 + rng.next_below(250));
      ++frames;
      if (!s.send(testutil::frame_of(body))) break;
      responses += s.recv().has_value();
    }
    if (conn % 4 == 0) {  // truncated frame, then hang up
      const auto f = wire::encode_request(wire::kPut, "rogue", Bytes(100, 1));
      s.send(std::span(f).first(30));
    }
  }
  {
    testutil::RawSocket s(mem_server.port());
    const Bytes huge{0xff, 0xff, 0xff, 0xff};
    s.send(huge);
    const auto r = s.recv();
    responses += r && r->status == wire::kError;
    ++frames;
  }
  RemoteClient after(mem_server.address());
  after.put("alive", Bytes{1, 2, 3});
  const bool alive = after.get("alive") == Bytes{1, 2, 3} && !mem->exists("rogue");
  ok = ok && alive && responses == frames;
  notes.push_back(fmt("%zu rogue frames, %zu answered, server %s, %llu protocol errors counted", frames, responses,
                      alive ? "alive" : "DOWN", (unsigned long long)mem_server.protocol_errors()));
  dir_server.stop();
  mem_server.stop();

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : "; ") + n;
  return {ok, detail};
}

Outcome ac9_prompts() {
  const std::vector<Document> docs{{"12", "Iliad", "The Iliad is an ancient Greek epic poem attributed to Homer."},
                                   {"7", "Homer", "Homer is the presumed author of the Iliad and the Odyssey."}};
  const fs::path dir(HYPERRAG_GOLDEN_DIR);
  const bool rag = assemble_prompt("who wrote the iliad?", docs) == testutil::read_file(dir / "prompt_rag.txt");
  const bool no_rag = assemble_prompt("who wrote the iliad?", {}) == testutil::read_file(dir / "prompt_no_rag.txt");
  return {rag && no_rag, fmt("RAG template %s, no-RAG template %s", rag ? "byte-exact" : "DIFFERS",
                             no_rag ? "byte-exact" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"AC1 lossless reuse", ac1_lossless},       {"AC2 end-to-end mode equivalence", ac2_end_to_end},
      {"AC3 counter ratios", ac3_counters},       {"AC4 throughput trend", ac4_throughput},
      {"AC5 quantization", ac5_quantization},     {"AC6 IVF correctness", ac6_ivf},
      {"AC7 shard locality", ac7_locality},       {"AC8 backend equivalence", ac8_backends},
      {"AC9 prompt fidelity", ac9_prompts},
  };
  // Optional arguments select criteria by prefix, e.g. "AC4".
  auto selected = [&](const std::string& name) {
    if (argc < 2) return true;
    for (int i = 1; i < argc; ++i)
      if (name.rfind(argv[i], 0) == 0) return true;
    return false;
  };
  int failed = 0, ran = 0;
  for (const auto& [name, fn] : criteria) {
    if (!selected(name)) continue;
    ++ran;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(Clock::now() - t0).count();
    std::cout << (o.pass ? "PASS " : "FAIL ") << name << ": " << o.detail << fmt(" [%.1fs]", s) << std::endl;
    failed += !o.pass;
  }
  std::cout << (failed ? "FAILED " : "ALL PASSED ") << (ran - failed) << "/" << ran << std::endl;
  return failed ? 1 : 0;
}
