#include "hyperrag/app.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>

#include <json.hpp>

#include "hyperrag/error.hpp"
#include "hyperrag/hash.hpp"

namespace hyperrag::app {

namespace fs = std::filesystem;
using json = nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

// Re-raise with a context prefix, keeping the code and dropping the old prefix.
[[noreturn]] void rethrow_with(const Error& e, const std::string& context) {
  std::string msg = e.what();
  const auto prefix = std::string(to_string(e.code())) + ": ";
  if (msg.starts_with(prefix)) msg.erase(0, prefix.size());
  throw Error(e.code(), context + ": " + msg);
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out || !out.write(text.data(), static_cast<std::streamsize>(text.size())))
    throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i > start) out.push_back(text.substr(start, i - start));
  }
  return out;
}

std::string zero_pad(std::string_view prefix, std::size_t n) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%06zu", n);
  return std::string(prefix) + buf;
}

}  // namespace

// ---- generation ----

const std::vector<std::string>& word_list() {
  static const std::vector<std::string> words = [] {
    static constexpr const char* kOnsets[] = {"b", "d", "f", "g", "k", "l", "m", "n",
                                              "p", "r", "s", "t", "v", "z", "ch", "sh"};
    static constexpr const char* kVowels[] = {"a", "e", "i", "o", "u", "ai", "ea", "ou"};
    std::vector<std::string> syl;
    for (const char* o : kOnsets)
      for (const char* v : kVowels) syl.push_back(std::string(o) + v);
    std::vector<std::string> out;
    out.reserve(syl.size() * syl.size());
    for (const auto& a : syl)
      for (const auto& b : syl) out.push_back(a + b);
    return out;
  }();
  return words;
}

std::vector<Document> generate_corpus(std::size_t count, std::size_t words_per_doc, std::uint64_t seed,
                                      std::size_t topics) {
  if (count == 0) throw Error(ErrorCode::kUsage, "count must be at least 1");
  if (words_per_doc == 0) throw Error(ErrorCode::kUsage, "words_per_doc must be at least 1");
  if (topics == 0) throw Error(ErrorCode::kUsage, "topics must be at least 1");
  const auto& words = word_list();
  const std::size_t slice = words.size() / topics;
  SplitMix64 rng(seed);
  std::vector<Document> docs;
  docs.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t topic = rng.next_below(topics);
    auto topic_word = [&] { return words[topic * slice + rng.next_below(slice)]; };
    Document d;
    d.id = zero_pad("doc-", i);
    d.title = topic_word() + " " + topic_word();
    for (std::size_t w = 0; w < words_per_doc; ++w) {
      if (w > 0) d.text.push_back(' ');
      d.text += rng.next_unit_double() < 0.8 ? topic_word() : words[rng.next_below(words.size())];
    }
    docs.push_back(std::move(d));
  }
  return docs;
}

std::vector<Query> generate_workload(std::span<const Document> corpus, std::size_t count, std::size_t words,
                                     std::uint64_t seed) {
  if (corpus.empty()) throw Error(ErrorCode::kUsage, "cannot derive queries from an empty corpus");
  if (count == 0 || words == 0) throw Error(ErrorCode::kUsage, "query count and length must be at least 1");
  SplitMix64 rng(seed ^ 0x51ed270b27e5a1b3ULL);
  std::vector<Query> out;
  out.reserve(count);
  for (std::size_t q = 0; q < count; ++q) {
    const auto& doc = corpus[rng.next_below(corpus.size())];
    const auto w = split_words(doc.text);
    const std::size_t take = std::min(words, w.size());
    const std::size_t start = w.size() > take ? rng.next_below(w.size() - take + 1) : 0;
    std::string text;
    for (std::size_t i = 0; i < take; ++i) {
      if (i > 0) text.push_back(' ');
      text += w[start + i];
    }
    out.push_back(Query{zero_pad("q-", q), std::move(text)});
  }
  return out;
}

void cmd_gen_corpus(std::size_t count, std::size_t words_per_doc, std::uint64_t seed, const fs::path& out_path) {
  const auto docs = generate_corpus(count, words_per_doc, seed);
  write_corpus(out_path, docs);
}

// ---- config ----

namespace {

template <typename T>
void take(const json& j, const char* key, T& out, std::set<std::string>& seen) {
  if (!j.contains(key)) return;
  seen.insert(key);
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("config key '") + key + "': " + e.what());
  }
}

void reject_unknown(const json& j, const std::set<std::string>& seen, const char* section) {
  for (const auto& [k, v] : j.items())
    if (!seen.contains(k))
      throw Error(ErrorCode::kInvalidConfig, std::string("unknown key '") + k + "' in " + section + " config");
}

void require_object(const json& j, const char* section) {
  if (!j.is_object()) throw Error(ErrorCode::kInvalidConfig, std::string(section) + " config must be an object");
}

void apply_model(const json& j, ModelConfig& m) {
  require_object(j, "model");
  std::set<std::string> seen;
  take(j, "layers", m.layers, seen);
  take(j, "model_dim", m.model_dim, seen);
  take(j, "heads", m.heads, seen);
  take(j, "kv_heads", m.kv_heads, seen);
  take(j, "head_dim", m.head_dim, seen);
  take(j, "vocab_size", m.vocab_size, seen);
  take(j, "rope_base", m.rope_base, seen);
  take(j, "max_position", m.max_position, seen);
  take(j, "seed", m.seed, seen);
  reject_unknown(j, seen, "model");
}

json model_json(const ModelConfig& m) {
  return {{"layers", m.layers},         {"model_dim", m.model_dim},   {"heads", m.heads},
          {"kv_heads", m.kv_heads},     {"head_dim", m.head_dim},     {"vocab_size", m.vocab_size},
          {"rope_base", m.rope_base},   {"max_position", m.max_position}, {"seed", m.seed}};
}

void apply_layout(const json& j, LayoutConfig& l) {
  require_object(j, "layout");
  std::set<std::string> seen;
  take(j, "document_len", l.document_len, seen);
  take(j, "query_len", l.query_len, seen);
  take(j, "pad_id", l.pad_id, seen);
  reject_unknown(j, seen, "layout");
}

json layout_json(const LayoutConfig& l) {
  return {{"document_len", l.document_len}, {"query_len", l.query_len}, {"pad_id", l.pad_id}};
}

KernelPath parse_kernel_path(const std::string& s) {
  if (s == "reference") return KernelPath::kReference;
  if (s == "optimized") return KernelPath::kOptimized;
  throw Error(ErrorCode::kInvalidConfig, "unknown kernel path '" + s + "'");
}

void apply_pipeline(const json& j, PipelineConfig& p) {
  require_object(j, "pipeline");
  std::set<std::string> seen;
  take(j, "retrieve_k", p.retrieve_k, seen);
  take(j, "keep_m", p.keep_m, seen);
  take(j, "nprobe", p.nprobe, seen);
  take(j, "max_batch", p.max_batch, seen);
  take(j, "rerank_workers", p.rerank_workers, seen);
  take(j, "fetch_workers", p.fetch_workers, seen);
  take(j, "queue_capacity", p.queue_capacity, seen);
  take(j, "single_in_flight", p.single_in_flight, seen);
  std::string s;
  if (j.contains("rerank_mode")) {
    take(j, "rerank_mode", s, seen);
    p.rerank_mode = parse_score_mode(s);
  }
  if (j.contains("kernel_path")) {
    take(j, "kernel_path", s, seen);
    p.kernel_path = parse_kernel_path(s);
  }
  if (j.contains("quant")) {
    take(j, "quant", s, seen);
    p.quant = parse_quant_scheme(s);
  }
  if (j.contains("max_wait_ms")) {
    double wait_ms = 0.0;
    take(j, "max_wait_ms", wait_ms, seen);
    p.max_wait = std::chrono::microseconds(static_cast<std::int64_t>(wait_ms * 1000.0));
  }
  reject_unknown(j, seen, "pipeline");
}

}  // namespace

void apply_config_file(const fs::path& path, Overrides& o) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, path.string() + ": " + e.what());
  }
  require_object(j, "top-level");
  for (const auto& [k, v] : j.items()) {
    if (k == "model") {
      apply_model(v, o.model);
    } else if (k == "layout") {
      apply_layout(v, o.layout);
      o.pipeline.layout = o.layout;
    } else if (k == "pipeline") {
      apply_pipeline(v, o.pipeline);
    } else if (k == "build") {
      require_object(v, "build");
      std::set<std::string> seen;
      take(v, "nlist", o.nlist, seen);
      take(v, "num_shards", o.num_shards, seen);
      take(v, "embed_dim", o.embed_dim, seen);
      if (v.contains("scheme")) {
        std::string s;
        take(v, "scheme", s, seen);
        o.scheme = parse_quant_scheme(s);
      }
      reject_unknown(v, seen, "build");
    } else {
      throw Error(ErrorCode::kInvalidConfig, "unknown config section '" + k + "'");
    }
  }
  o.model.validate();
  o.layout.validate(o.model);
}

// ---- manifest ----

std::string Manifest::to_json() const {
  json entries_j = json::array();
  for (const auto& e : entries) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx", static_cast<unsigned long long>(e.checksum));
    entries_j.push_back(
        {{"id", e.chunk_id}, {"centroid", e.centroid}, {"shard", e.shard}, {"bytes", e.bytes}, {"fnv1a64", hex}});
  }
  json j = {{"format", "hyperrag-build"},
            {"version", 1},
            {"model", model_json(model)},
            {"layout", layout_json(layout)},
            {"nlist", nlist},
            {"num_shards", num_shards},
            {"embed_dim", embed_dim},
            {"scheme", std::string(to_string(scheme))},
            {"seed", seed},
            {"store", store_location},
            {"entry_count", entries.size()},
            {"payload_bytes_per_entry", payload_bytes},
            {"total_entry_bytes", total_entry_bytes},
            {"entries", entries_j}};
  return j.dump(2) + "\n";
}

Manifest Manifest::from_json(const std::string& text) {
  Manifest m;
  try {
    const json j = json::parse(text);
    if (j.at("format") != "hyperrag-build" || j.at("version") != 1)
      throw Error(ErrorCode::kFormat, "not a version-1 build manifest");
    apply_model(j.at("model"), m.model);
    apply_layout(j.at("layout"), m.layout);
    m.nlist = j.at("nlist");
    m.num_shards = j.at("num_shards");
    m.embed_dim = j.at("embed_dim");
    m.scheme = parse_quant_scheme(j.at("scheme").get<std::string>());
    m.seed = j.at("seed");
    m.store_location = j.at("store");
    m.payload_bytes = j.at("payload_bytes_per_entry");
    m.total_entry_bytes = j.at("total_entry_bytes");
    for (const auto& e : j.at("entries")) {
      ManifestEntry me;
      me.chunk_id = e.at("id");
      me.centroid = e.at("centroid");
      me.shard = e.at("shard");
      me.bytes = e.at("bytes");
      me.checksum = std::stoull(e.at("fnv1a64").get<std::string>(), nullptr, 16);
      m.entries.push_back(std::move(me));
    }
    if (j.at("entry_count") != m.entries.size()) throw Error(ErrorCode::kFormat, "manifest entry count mismatch");
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kFormat, std::string("malformed manifest: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw Error(ErrorCode::kFormat, "malformed manifest checksum");
  }
  return m;
}

Manifest Manifest::load(const fs::path& built_dir) {
  const auto path = built_dir / "manifest.json";
  if (!fs::exists(path)) throw Error(ErrorCode::kUsage, "no build found at " + built_dir.string() + " (missing manifest.json)");
  return from_json(read_text(path));
}

namespace {

std::string resolve_store(const std::string& location, const fs::path& built_dir) {
  if (location.starts_with("dir:")) {
    fs::path p = location.substr(4);
    if (p.is_relative()) p = built_dir / p;
    return "dir:" + p.string();
  }
  return location;
}

std::uint64_t checksum(std::span<const std::uint8_t> bytes) {
  return fnv1a64(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

}  // namespace

// ---- build ----

Manifest cmd_build(const fs::path& corpus_path, const fs::path& out_dir, const BuildOptions& o) {
  o.model.validate();
  o.layout.validate(o.model);
  const auto docs = read_corpus(corpus_path);
  if (docs.empty()) throw Error(ErrorCode::kUsage, "corpus " + corpus_path.string() + " is empty");

  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + out_dir.string() + ": " + ec.message());

  Matrix emb{docs.size(), o.embed_dim, std::vector<float>(docs.size() * o.embed_dim)};
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto v = embed_text(docs[i].text, o.embed_dim);
    std::copy(v.begin(), v.end(), emb.row(i).begin());
  }
  IvfIndex index = IvfIndex::train(emb, o.nlist, 10, o.seed);

  Manifest m;
  m.model = o.model;
  m.layout = o.layout;
  m.nlist = o.nlist;
  m.num_shards = o.num_shards;
  m.embed_dim = o.embed_dim;
  m.scheme = o.scheme;
  m.seed = o.seed;
  m.store_location = o.store_location.empty() ? "dir:kv" : o.store_location;
  auto store = open_store(resolve_store(m.store_location, out_dir), o.num_shards);

  auto weights = std::make_shared<const Weights>(init_weights(o.model));
  Reranker rr(weights, o.layout, KernelPath::kOptimized);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const auto& d = docs[i];
    try {
      const std::size_t c = index.add(d.id, emb.row(i));
      const auto tokens = tokenize(d.text, o.layout.document_len, o.model.vocab_size, o.layout.pad_id);
      const DocKV kv = rr.doc_prefill(d.id, tokens);
      const Bytes bytes = encode_entry(kv, o.scheme);
      store->put_entry(d.id, c, bytes);
      m.payload_bytes = kv.payload_bytes();
      m.total_entry_bytes += bytes.size();
      m.entries.push_back(ManifestEntry{d.id, c, store->shard_for(c), bytes.size(), checksum(bytes)});
    } catch (const Error& e) {
      rethrow_with(e, "chunk '" + d.id + "'");
    }
  }

  index.save(out_dir / "index.hriv");
  write_corpus(out_dir / "corpus.jsonl", docs);
  write_text(out_dir / "manifest.json", m.to_json());
  return m;
}

BuiltArtifacts load_built(const fs::path& built_dir, const std::string& store_override) {
  BuiltArtifacts a;
  a.manifest = Manifest::load(built_dir);
  for (const char* f : {"index.hriv", "corpus.jsonl"})
    if (!fs::exists(built_dir / f)) throw Error(ErrorCode::kUsage, "build is missing " + std::string(f));
  a.weights = std::make_shared<const Weights>(init_weights(a.manifest.model));
  a.index = std::make_shared<const IvfIndex>(IvfIndex::load(built_dir / "index.hriv"));
  a.corpus = read_corpus(built_dir / "corpus.jsonl");
  const std::string loc = store_override.empty() ? a.manifest.store_location : store_override;
  a.store = open_store(resolve_store(loc, built_dir), a.manifest.num_shards);
  return a;
}

// ---- verify ----

std::string VerifyReport::to_json() const {
  json j = {{"ok", ok()},
            {"trials", trials},
            {"entries_checked", entries_checked},
            {"reencoded", reencoded},
            {"lossless_pairs", lossless_pairs},
            {"locality_queries", locality_queries},
            {"failures", failures}};
  return j.dump(2);
}

namespace {

std::string hex_float(float f) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.9g (%a)", static_cast<double>(f), static_cast<double>(f));
  return buf;
}

}  // namespace

VerifyReport cmd_verify(const fs::path& built_dir, std::size_t trials, std::uint64_t seed,
                        const std::string& store_override) {
  if (trials == 0) throw Error(ErrorCode::kUsage, "trials must be at least 1");
  const auto a = load_built(built_dir, store_override);
  const auto& m = a.manifest;
  VerifyReport rep;
  rep.trials = trials;
  auto fail = [&](std::string msg) { rep.failures.push_back(std::move(msg)); };

  // Stored bytes against the manifest, and placement across every shard.
  std::unordered_map<std::string, const ManifestEntry*> by_id;
  for (const auto& e : m.entries) {
    by_id[e.chunk_id] = &e;
    const auto bytes = a.store->get_entry(e.chunk_id, e.centroid);
    ++rep.entries_checked;
    if (!bytes) {
      fail("entry '" + e.chunk_id + "': missing from shard " + std::to_string(e.shard));
      continue;
    }
    if (bytes->size() != e.bytes || checksum(*bytes) != e.checksum)
      fail("entry '" + e.chunk_id + "': stored bytes do not match the manifest checksum");
    for (std::size_t s = 0; s < a.store->num_shards(); ++s) {
      const bool present = a.store->exists_in_shard(s, e.chunk_id);
      if (s == a.store->shard_for(e.centroid) && !present)
        fail("entry '" + e.chunk_id + "': not found by EXISTS in its shard " + std::to_string(s));
      if (s != a.store->shard_for(e.centroid) && present)
        fail("entry '" + e.chunk_id + "': also present in shard " + std::to_string(s) + ", placement violated");
    }
  }
  for (const auto& [c, item] : a.index->items()) {
    auto it = by_id.find(item.chunk_id);
    if (it == by_id.end()) fail("index item '" + item.chunk_id + "' has no manifest entry");
    else if (it->second->centroid != c)
      fail("entry '" + item.chunk_id + "': manifest centroid " + std::to_string(it->second->centroid) +
           " but indexed under " + std::to_string(c));
    if (nearest_centroid(a.index->centroids(), item.vector) != c)
      fail("index item '" + item.chunk_id + "': reassignment disagrees with its stored centroid");
  }

  // Losslessness on the reference path, with re-encoding of each sampled entry.
  Reranker ref(a.weights, m.layout, KernelPath::kReference);
  SplitMix64 rng(seed);
  std::unordered_map<std::string, std::size_t> doc_pos;
  for (std::size_t i = 0; i < a.corpus.size(); ++i) doc_pos[a.corpus[i].id] = i;
  std::set<std::string> reencoded;
  const auto& words = word_list();
  for (std::size_t t = 0; t < trials && !m.entries.empty(); ++t) {
    const auto& e = m.entries[rng.next_below(m.entries.size())];
    auto pos = doc_pos.find(e.chunk_id);
    if (pos == doc_pos.end()) {
      fail("entry '" + e.chunk_id + "': missing from the corpus");
      continue;
    }
    const auto& doc = a.corpus[pos->second];
    const auto doc_tokens = tokenize(doc.text, m.layout.document_len, m.model.vocab_size, m.layout.pad_id);
    const std::size_t qwords = 1 + rng.next_below(m.layout.query_len);
    std::string question;
    for (std::size_t w = 0; w < qwords; ++w) question += words[rng.next_below(words.size())] + " ";
    const auto query_tokens = tokenize(question, m.layout.query_len, m.model.vocab_size, m.layout.pad_id);
    try {
      const DocKV fresh = ref.doc_prefill(doc.id, doc_tokens);
      if (!reencoded.contains(doc.id)) {
        reencoded.insert(doc.id);
        const auto stored = a.store->get_entry(e.chunk_id, e.centroid);
        if (stored && *stored != encode_entry(fresh, m.scheme))
          fail("entry '" + doc.id + "': stored bytes differ from a fresh reference-path encoding");
        if (stored && m.scheme == QuantScheme::kF32) {
          const DocKV decoded = decode_entry(*stored);
          if (encode_entry(decoded, QuantScheme::kF32) != *stored)
            fail("entry '" + doc.id + "': F32 decode/encode does not roundtrip");
        }
      }
      const DocKV via_store = [&] {
        if (m.scheme != QuantScheme::kF32) return fresh;
        const auto stored = a.store->get_entry(e.chunk_id, e.centroid);
        return stored ? decode_entry(*stored) : fresh;
      }();
      const float full = ref.score_full(doc_tokens, query_tokens).score;
      const float reuse = ref.score_reuse(via_store, query_tokens).score;
      ++rep.lossless_pairs;
      if (std::bit_cast<std::uint32_t>(full) != std::bit_cast<std::uint32_t>(reuse))
        fail("trial " + std::to_string(t) + " doc '" + doc.id + "' query \"" + question + "\": full " +
             hex_float(full) + " != reuse " + hex_float(reuse));
    } catch (const Error& err) {
      fail("trial " + std::to_string(t) + " doc '" + doc.id + "': " + err.what());
    }
  }
  rep.reencoded = reencoded.size();

  // Locality: the shards a query's candidates live in never exceed nprobe.
  const auto queries = generate_workload(a.corpus, trials, 12, seed);
  for (const auto& q : queries) {
    const auto v = embed_text(q.question, a.index->dim());
    for (std::size_t nprobe : {std::size_t{1}, std::min<std::size_t>(4, a.index->nlist())}) {
      std::set<std::size_t> shards;
      for (const auto& c : a.index->search(v, 20, nprobe)) shards.insert(a.store->shard_for(c.centroid_id));
      if (shards.size() > nprobe)
        fail("query '" + q.id + "': " + std::to_string(shards.size()) + " shards touched with nprobe " +
             std::to_string(nprobe));
    }
    ++rep.locality_queries;
  }
  return rep;
}

// ---- bench ----

void BenchSpec::validate() const {
  if (document_lens.empty() || batch_sizes.empty() || modes.empty())
    throw Error(ErrorCode::kUsage, "bench sweeps must be nonempty");
  if (repetitions == 0) throw Error(ErrorCode::kUsage, "repetitions must be at least 1");
  for (auto d : document_lens)
    if (d == 0) throw Error(ErrorCode::kUsage, "document_len must be positive");
  for (auto b : batch_sizes)
    if (b == 0) throw Error(ErrorCode::kUsage, "batch size must be positive");
  if (query_len == 0) throw Error(ErrorCode::kUsage, "query_len must be positive");
}

std::string SweepRow::csv_header() {
  return "document_len,query_len,batch,mode,repetitions,mean_latency_ms,median_latency_ms,pairs_per_s,"
         "linear_token_count,attn_mac_pairs,peak_activation_tokens,kv_bytes_loaded,"
         "linear_ratio_vs_full,attn_ratio_vs_full,peak_ratio_vs_full";
}

std::string SweepRow::to_csv_row() const {
  std::ostringstream os;
  os << std::setprecision(9) << document_len << ',' << query_len << ',' << batch << ',' << to_string(mode) << ','
     << repetitions << ',' << mean_latency_ms << ',' << median_latency_ms << ',' << pairs_per_s << ','
     << counters.linear_token_count << ',' << counters.attn_mac_pairs << ',' << counters.peak_activation_tokens
     << ',' << counters.kv_bytes_loaded << ',' << linear_ratio << ',' << attn_ratio << ',' << peak_ratio;
  return os.str();
}

namespace {

json sweep_json(const SweepRow& r) {
  return {{"document_len", r.document_len},
          {"query_len", r.query_len},
          {"batch", r.batch},
          {"mode", std::string(to_string(r.mode))},
          {"repetitions", r.repetitions},
          {"mean_latency_ms", r.mean_latency_ms},
          {"median_latency_ms", r.median_latency_ms},
          {"pairs_per_s", r.pairs_per_s},
          {"linear_token_count", r.counters.linear_token_count},
          {"attn_mac_pairs", r.counters.attn_mac_pairs},
          {"peak_activation_tokens", r.counters.peak_activation_tokens},
          {"kv_bytes_loaded", r.counters.kv_bytes_loaded},
          {"linear_ratio_vs_full", r.linear_ratio},
          {"attn_ratio_vs_full", r.attn_ratio},
          {"peak_ratio_vs_full", r.peak_ratio}};
}

std::string random_text(SplitMix64& rng, std::size_t words) {
  const auto& list = word_list();
  std::string s;
  for (std::size_t i = 0; i < words; ++i) {
    if (i > 0) s.push_back(' ');
    s += list[rng.next_below(list.size())];
  }
  return s;
}

double ratio(std::uint64_t a, std::uint64_t b) { return b == 0 ? 0.0 : static_cast<double>(a) / static_cast<double>(b); }

}  // namespace

std::vector<SweepRow> run_sweep(const ModelConfig& model, const BenchSpec& spec) {
  spec.validate();
  auto weights = std::make_shared<const Weights>(init_weights(model));
  std::vector<SweepRow> rows;
  const std::size_t max_batch = *std::max_element(spec.batch_sizes.begin(), spec.batch_sizes.end());
  for (std::size_t d : spec.document_lens) {
    LayoutConfig layout{d, spec.query_len, 0};
    Reranker rr(weights, layout, KernelPath::kOptimized, spec.threads);
    SplitMix64 rng(spec.seed ^ (0x9e3779b97f4a7c15ULL * (d + 1)));
    // Full-length documents and queries: no padding anywhere in the sweep.
    std::vector<std::vector<TokenId>> docs, queries;
    std::vector<Bytes> entries;
    for (std::size_t i = 0; i < max_batch; ++i) {
      docs.push_back(tokenize(random_text(rng, d), d, model.vocab_size, 0));
      queries.push_back(tokenize(random_text(rng, spec.query_len), spec.query_len, model.vocab_size, 0));
    }
    if (std::find(spec.modes.begin(), spec.modes.end(), ScoreMode::kReuse) != spec.modes.end())
      for (std::size_t i = 0; i < max_batch; ++i)
        entries.push_back(encode_entry(rr.doc_prefill(zero_pad("bench-", i), docs[i]), QuantScheme::kF32));

    for (std::size_t b : spec.batch_sizes) {
      CounterReport full_counters;
      full_counters.linear_token_count = b * (d + spec.query_len);
      full_counters.attn_mac_pairs = b * causal_pairs(d + spec.query_len);
      full_counters.peak_activation_tokens = b * (d + spec.query_len);
      for (ScoreMode mode : spec.modes) {
        std::vector<double> lat;
        CounterReport counters;
        for (std::size_t rep = 0; rep < spec.warmup + spec.repetitions; ++rep) {
          const auto t0 = Clock::now();
          std::vector<DocKV> kvs;
          std::vector<BatchItem> items;
          if (mode == ScoreMode::kReuse) {
            kvs.reserve(b);
            for (std::size_t i = 0; i < b; ++i) kvs.push_back(decode_entry(entries[i]));
          }
          for (std::size_t i = 0; i < b; ++i) {
            BatchItem it;
            it.chunk_id = zero_pad("bench-", i);
            it.query_id = "q";
            it.query_tokens = queries[i];
            if (mode == ScoreMode::kReuse) it.doc_kv = &kvs[i];
            else it.doc_tokens = docs[i];
            items.push_back(std::move(it));
          }
          const auto res = rr.score_batch(items, mode, b);
          const double ms = std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
          if (rep >= spec.warmup) lat.push_back(ms);
          counters = res.counters;
        }
        SweepRow row;
        row.document_len = d;
        row.query_len = spec.query_len;
        row.batch = b;
        row.mode = mode;
        row.repetitions = spec.repetitions;
        const auto s = summarize_latency(lat);
        row.mean_latency_ms = s.mean_ms;
        std::sort(lat.begin(), lat.end());
        row.median_latency_ms = lat.size() % 2 ? lat[lat.size() / 2] : 0.5 * (lat[lat.size() / 2 - 1] + lat[lat.size() / 2]);
        row.pairs_per_s = s.mean_ms > 0.0 ? 1000.0 * static_cast<double>(b) / s.mean_ms : 0.0;
        row.counters = counters;
        row.linear_ratio = ratio(counters.linear_token_count, full_counters.linear_token_count);
        row.attn_ratio = ratio(counters.attn_mac_pairs, full_counters.attn_mac_pairs);
        row.peak_ratio = ratio(counters.peak_activation_tokens, full_counters.peak_activation_tokens);
        rows.push_back(row);
      }
    }
  }
  return rows;
}

std::string BenchReport::to_json() const {
  json j = {{"sweep", json::array()}, {"pipeline", json::array()}};
  for (const auto& r : sweep) j["sweep"].push_back(sweep_json(r));
  for (const auto& m : pipeline) j["pipeline"].push_back(json::parse(m.to_json()));
  return j.dump(2) + "\n";
}

BenchReport cmd_bench(const fs::path& built_dir, const BenchSpec& spec, const fs::path& workload_path,
                      const fs::path& report_dir, const std::string& store_override) {
  spec.validate();
  const auto a = load_built(built_dir, store_override);
  const auto& m = a.manifest;
  if (spec.query_len != m.layout.query_len)
    throw Error(ErrorCode::kUsage, "bench query_len " + std::to_string(spec.query_len) +
                                       " does not match the built layout's " + std::to_string(m.layout.query_len));
  if (std::find(spec.document_lens.begin(), spec.document_lens.end(), m.layout.document_len) ==
      spec.document_lens.end())
    throw Error(ErrorCode::kUsage, "built document_len " + std::to_string(m.layout.document_len) +
                                       " is not part of the bench sweep");
  auto queries = read_workload(workload_path);
  if (queries.size() > spec.pipeline_queries) queries.resize(spec.pipeline_queries);
  if (queries.size() <= spec.pipeline_warmup)
    throw Error(ErrorCode::kUsage, "workload needs more than " + std::to_string(spec.pipeline_warmup) + " queries");

  std::error_code ec;
  fs::create_directories(report_dir, ec);
  if (ec) throw Error(ErrorCode::kIo, "cannot create " + report_dir.string() + ": " + ec.message());

  BenchReport rep;
  rep.sweep = run_sweep(m.model, spec);

  PipelineResources res{a.weights, a.index, a.store, a.corpus};
  for (std::size_t b : spec.batch_sizes) {
    for (ScoreMode mode : spec.modes) {
      PipelineConfig pc;
      pc.layout = m.layout;
      pc.rerank_mode = mode;
      pc.max_batch = b;
      pc.rerank_workers = spec.rerank_workers;
      pc.nprobe = std::min<std::size_t>(pc.nprobe, a.index->nlist());
      pc.quant = m.scheme;
      Pipeline p(res, pc);
      rep.pipeline.push_back(p.run_workload(queries, spec.pipeline_warmup).metrics);
    }
  }

  std::string sweep_csv = SweepRow::csv_header() + "\n";
  for (const auto& r : rep.sweep) sweep_csv += r.to_csv_row() + "\n";
  std::string pipe_csv = MetricsReport::csv_header() + "\n";
  for (const auto& r : rep.pipeline) pipe_csv += r.to_csv_row() + "\n";
  write_text(report_dir / "sweep.csv", sweep_csv);
  write_text(report_dir / "pipeline.csv", pipe_csv);
  write_text(report_dir / "report.json", rep.to_json());
  return rep;
}

// ---- query ----

std::string response_to_json(const RagResponse& r) {
  json sel = json::array();
  for (const auto& s : r.selected) sel.push_back({{"chunk_id", s.chunk_id}, {"score", s.score}});
  json j = {{"query_id", r.query_id},
            {"selected", sel},
            {"prompt", r.prompt},
            {"candidates", r.candidates},
            {"cache_misses", r.cache_misses},
            {"shards_touched", r.shards_touched},
            {"bytes_fetched", r.bytes_fetched},
            {"timings_ms",
             {{"retrieve", r.timings.retrieve_ms},
              {"fetch", r.timings.fetch_ms},
              {"rerank", r.timings.rerank_ms},
              {"select", r.timings.select_ms},
              {"total", r.timings.total_ms}}},
            {"counters",
             {{"linear_token_count", r.counters.linear_token_count},
              {"attn_mac_pairs", r.counters.attn_mac_pairs},
              {"peak_activation_tokens", r.counters.peak_activation_tokens},
              {"kv_bytes_loaded", r.counters.kv_bytes_loaded}}}};
  return j.dump(2);
}

RagResponse cmd_query(const fs::path& built_dir, const std::string& question, PipelineConfig config,
                      const std::string& store_override) {
  const auto a = load_built(built_dir, store_override);
  config.layout = a.manifest.layout;
  config.nprobe = std::min(config.nprobe, a.index->nlist());
  Pipeline p(PipelineResources{a.weights, a.index, a.store, a.corpus}, config);
  return p.handle_query("q-000000", question);
}

}  // namespace hyperrag::app
