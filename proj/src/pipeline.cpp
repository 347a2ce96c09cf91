#include "hyperrag/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <cmath>
#include <condition_variable>
#include <exception>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "hyperrag/bounded_queue.hpp"
#include "hyperrag/error.hpp"
#include "hyperrag/hash.hpp"

namespace hyperrag {

using Clock = std::chrono::steady_clock;
using json = nlohmann::json;

namespace {

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

}  // namespace

std::vector<float> embed_text(std::string_view text, std::size_t dim) {
  if (dim == 0) throw Error(ErrorCode::kInvalidConfig, "embedding dimension must be positive");
  std::vector<double> acc(dim, 0.0);
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    const std::size_t start = i;
    while (i < text.size() && !std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    if (i == start) continue;
    const std::uint64_t h = fnv1a64(text.substr(start, i - start));
    acc[h % dim] += (h >> 63) ? -1.0 : 1.0;
  }
  double ss = 0.0;
  for (double x : acc) ss += x * x;
  std::vector<float> out(dim);
  const double inv = ss > 0.0 ? 1.0 / std::sqrt(ss) : 1.0;
  for (std::size_t j = 0; j < dim; ++j) out[j] = static_cast<float>(acc[j] * inv);
  return out;
}

namespace {

constexpr std::string_view kSystemHeader = "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n\n";
constexpr std::string_view kUserHeader = "<|eot_id|><|start_header_id|>user<|end_header_id|>\n\n";
constexpr std::string_view kAssistantHeader = "<|eot_id|><|start_header_id|>assistant<|end_header_id|>";

}  // namespace

std::string assemble_prompt(std::string_view question, std::span<const Document> docs) {
  std::string out(kSystemHeader);
  if (docs.empty()) {
    out += "Answer the question based on your own knowledge. Only give me the answer\n"
           "and do not output any other words.";
  } else {
    out += "Answer the question based on the given document. Only give me the answer\n"
           "and do not output any other words.\n"
           "The following are given documents.\n\n";
    for (const auto& d : docs) {
      out += "Doc ";
      out += d.id;
      out += " (Title: ";
      out += d.title;
      out += ") ";
      out += d.text;
      out += "\n";
    }
    out += "\n";
  }
  out += kUserHeader;
  out += "Question: ";
  out += question;
  out += kAssistantHeader;
  return out;
}

namespace {

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot read " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kFormat, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    auto field = [&](const char* name) {
      if (!j.is_object() || !j.contains(name) || !j[name].is_string())
        throw Error(ErrorCode::kFormat,
                    path.string() + ":" + std::to_string(lineno) + ": missing string field '" + name + "'");
      return j[name].get<std::string>();
    };
    fn(field);
  }
}

void write_lines(const std::filesystem::path& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
  if (!out.flush()) throw Error(ErrorCode::kIo, "cannot write " + path.string());
}

}  // namespace

std::vector<Document> read_corpus(const std::filesystem::path& path) {
  std::vector<Document> docs;
  for_each_json_line(path, [&](auto&& field) { docs.push_back(Document{field("id"), field("title"), field("text")}); });
  return docs;
}

void write_corpus(const std::filesystem::path& path, std::span<const Document> docs) {
  std::vector<std::string> lines;
  for (const auto& d : docs) lines.push_back(json{{"id", d.id}, {"title", d.title}, {"text", d.text}}.dump());
  write_lines(path, lines);
}

std::vector<Query> read_workload(const std::filesystem::path& path) {
  std::vector<Query> qs;
  for_each_json_line(path, [&](auto&& field) { qs.push_back(Query{field("id"), field("question")}); });
  return qs;
}

void write_workload(const std::filesystem::path& path, std::span<const Query> queries) {
  std::vector<std::string> lines;
  for (const auto& q : queries) lines.push_back(json{{"id", q.id}, {"question", q.question}}.dump());
  write_lines(path, lines);
}

void PipelineConfig::validate() const {
  if (retrieve_k == 0) throw Error(ErrorCode::kInvalidConfig, "retrieve_k must be at least 1");
  if (keep_m > retrieve_k) throw Error(ErrorCode::kInvalidConfig, "keep_m must not exceed retrieve_k");
  if (nprobe == 0) throw Error(ErrorCode::kInvalidConfig, "nprobe must be at least 1");
  if (max_batch == 0) throw Error(ErrorCode::kInvalidConfig, "max_batch must be at least 1");
  if (rerank_workers == 0 || fetch_workers == 0)
    throw Error(ErrorCode::kInvalidConfig, "worker counts must be at least 1");
  if (max_wait.count() < 0) throw Error(ErrorCode::kInvalidConfig, "max_wait must not be negative");
}

LatencySummary summarize_latency(std::vector<double> samples) {
  LatencySummary s;
  if (samples.empty()) return s;
  std::sort(samples.begin(), samples.end());
  auto rank = [&](double p) {
    const auto r = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(samples.size())));
    return samples[std::clamp<std::size_t>(r, 1, samples.size()) - 1];
  };
  s.p50_ms = rank(50);
  s.p95_ms = rank(95);
  double sum = 0.0;
  for (double x : samples) sum += x;
  s.mean_ms = sum / static_cast<double>(samples.size());
  return s;
}

namespace {

json latency_json(const LatencySummary& l) { return {{"p50_ms", l.p50_ms}, {"p95_ms", l.p95_ms}, {"mean_ms", l.mean_ms}}; }

std::size_t max_shards(const std::map<std::size_t, std::size_t>& h) { return h.empty() ? 0 : h.rbegin()->first; }

}  // namespace

std::string MetricsReport::to_json() const {
  json hist = json::object();
  for (const auto& [k, v] : shards_touched) hist[std::to_string(k)] = v;
  json j = {
      {"mode", mode},
      {"document_len", document_len},
      {"query_len", query_len},
      {"max_batch", max_batch},
      {"rerank_workers", rerank_workers},
      {"fetch_workers", fetch_workers},
      {"retrieve_k", retrieve_k},
      {"nprobe", nprobe},
      {"quant", quant},
      {"queries", queries},
      {"warmup", warmup},
      {"wall_s", wall_s},
      {"throughput_qps", throughput_qps},
      {"latency",
       {{"total", latency_json(total)},
        {"retrieve", latency_json(retrieve)},
        {"fetch", latency_json(fetch)},
        {"rerank", latency_json(rerank)},
        {"select", latency_json(select)}}},
      {"counters",
       {{"linear_token_count", counters.linear_token_count},
        {"attn_mac_pairs", counters.attn_mac_pairs},
        {"peak_activation_tokens", counters.peak_activation_tokens},
        {"kv_bytes_loaded", counters.kv_bytes_loaded}}},
      {"pairs_scored", pairs_scored},
      {"bytes_fetched", bytes_fetched},
      {"cache_misses", cache_misses},
      {"shards_touched", hist},
  };
  return j.dump(2);
}

std::string MetricsReport::csv_header() {
  return "mode,document_len,query_len,max_batch,rerank_workers,fetch_workers,retrieve_k,nprobe,quant,"
         "queries,warmup,wall_s,throughput_qps,total_p50_ms,total_p95_ms,total_mean_ms,"
         "retrieve_p50_ms,retrieve_p95_ms,fetch_p50_ms,fetch_p95_ms,rerank_p50_ms,rerank_p95_ms,"
         "select_p50_ms,select_p95_ms,linear_token_count,attn_mac_pairs,peak_activation_tokens,"
         "kv_bytes_loaded,pairs_scored,bytes_fetched,cache_misses,max_shards_touched";
}

std::string MetricsReport::to_csv_row() const {
  std::ostringstream os;
  os << std::setprecision(9);
  os << mode << ',' << document_len << ',' << query_len << ',' << max_batch << ',' << rerank_workers << ','
     << fetch_workers << ',' << retrieve_k << ',' << nprobe << ',' << quant << ',' << queries << ',' << warmup << ','
     << wall_s << ',' << throughput_qps << ',' << total.p50_ms << ',' << total.p95_ms << ',' << total.mean_ms << ','
     << retrieve.p50_ms << ',' << retrieve.p95_ms << ',' << fetch.p50_ms << ',' << fetch.p95_ms << ','
     << rerank.p50_ms << ',' << rerank.p95_ms << ',' << select.p50_ms << ',' << select.p95_ms << ','
     << counters.linear_token_count << ',' << counters.attn_mac_pairs << ',' << counters.peak_activation_tokens
     << ',' << counters.kv_bytes_loaded << ',' << pairs_scored << ',' << bytes_fetched << ',' << cache_misses << ','
     << max_shards(shards_touched);
  return os.str();
}

Pipeline::Pipeline(PipelineResources resources, PipelineConfig config)
    : res_(std::move(resources)),
      config_(config),
      reranker_(res_.weights, config.layout, config.kernel_path, 1) {
  config_.validate();
  if (!res_.index || !res_.index->trained()) throw Error(ErrorCode::kInvalidConfig, "pipeline needs a trained index");
  if (config_.nprobe > res_.index->nlist())
    throw Error(ErrorCode::kInvalidConfig, "nprobe exceeds the index's nlist");
  if (config_.rerank_mode == ScoreMode::kReuse && !res_.store)
    throw Error(ErrorCode::kInvalidConfig, "reuse mode needs a KV store");
  const auto& mc = res_.weights->config;
  doc_tokens_.reserve(res_.corpus.size());
  for (std::size_t i = 0; i < res_.corpus.size(); ++i) {
    const auto& d = res_.corpus[i];
    if (!doc_index_.emplace(d.id, i).second) throw Error(ErrorCode::kDuplicate, "corpus id '" + d.id + "' repeats");
    doc_tokens_.push_back(tokenize(d.text, config_.layout.document_len, mc.vocab_size, config_.layout.pad_id));
  }
}

const Document& Pipeline::document(const std::string& chunk_id) const {
  auto it = doc_index_.find(chunk_id);
  if (it == doc_index_.end())
    throw Error(ErrorCode::kUsage, "chunk '" + chunk_id + "' is indexed but missing from the corpus");
  return res_.corpus[it->second];
}

const std::vector<TokenId>& Pipeline::doc_tokens(const std::string& chunk_id) const {
  auto it = doc_index_.find(chunk_id);
  if (it == doc_index_.end())
    throw Error(ErrorCode::kUsage, "chunk '" + chunk_id + "' is indexed but missing from the corpus");
  return doc_tokens_[it->second];
}

void Pipeline::retrieve(Job& job) const {
  const auto t0 = Clock::now();
  const auto& mc = res_.weights->config;
  job.query_tokens = tokenize(job.question, config_.layout.query_len, mc.vocab_size, config_.layout.pad_id);
  const auto q = embed_text(job.question, res_.index->dim());
  job.candidates = res_.index->search(q, config_.retrieve_k, config_.nprobe);
  job.response.query_id = job.query_id;
  job.response.candidates = job.candidates.size();
  job.response.timings.retrieve_ms = ms_since(t0);
}

void Pipeline::fetch(Job& job) const {
  const auto t0 = Clock::now();
  job.kv.assign(job.candidates.size(), std::nullopt);
  if (config_.rerank_mode == ScoreMode::kReuse) {
    std::set<std::size_t> shards;
    for (std::size_t i = 0; i < job.candidates.size(); ++i) {
      const auto& c = job.candidates[i];
      shards.insert(res_.store->shard_for(c.centroid_id));
      auto bytes = res_.store->get_entry(c.chunk_id, c.centroid_id);
      if (!bytes) {
        ++job.response.cache_misses;
        continue;
      }
      job.response.bytes_fetched += bytes->size();
      DocKV kv = decode_entry(*bytes);
      if (kv.chunk_id != c.chunk_id)
        throw Error(ErrorCode::kStore, "entry stored under '" + c.chunk_id + "' holds '" + kv.chunk_id + "'");
      job.kv[i] = std::move(kv);
    }
    job.response.shards_touched = shards.size();
  }
  job.response.timings.fetch_ms = ms_since(t0);
}

void Pipeline::rerank(std::span<Job*> jobs) const {
  const auto t0 = Clock::now();
  std::vector<BatchItem> reuse_items, full_items;
  std::vector<std::pair<Job*, std::size_t>> reuse_ref, full_ref;
  for (Job* job : jobs) {
    job->scores.assign(job->candidates.size(), 0.0f);
    job->pair_counters.assign(job->candidates.size(), CounterReport{});
    for (std::size_t i = 0; i < job->candidates.size(); ++i) {
      const auto& id = job->candidates[i].chunk_id;
      if (job->kv[i]) {
        reuse_items.push_back(BatchItem{id, job->query_id, &*job->kv[i], {}, job->query_tokens});
        reuse_ref.emplace_back(job, i);
      } else {
        full_items.push_back(BatchItem{id, job->query_id, nullptr, doc_tokens(id), job->query_tokens});
        full_ref.emplace_back(job, i);
      }
    }
  }
  auto scatter = [](const BatchResult& r, const std::vector<std::pair<Job*, std::size_t>>& refs) {
    for (std::size_t k = 0; k < refs.size(); ++k) {
      refs[k].first->scores[refs[k].second] = r.scores[k].score;
      refs[k].first->pair_counters[refs[k].second] = r.item_counters[k];
    }
  };
  if (!reuse_items.empty()) scatter(reranker_.score_batch(reuse_items, ScoreMode::kReuse, config_.max_batch), reuse_ref);
  if (!full_items.empty()) scatter(reranker_.score_batch(full_items, ScoreMode::kFull, config_.max_batch), full_ref);

  const double elapsed = ms_since(t0);
  for (Job* job : jobs) {
    job->response.counters = group_counters(job->pair_counters, config_.max_batch);
    job->response.timings.rerank_ms = elapsed;
    job->kv.clear();
  }
}

void Pipeline::select(Job& job) const {
  const auto t0 = Clock::now();
  std::vector<SelectedChunk> ranked(job.candidates.size());
  for (std::size_t i = 0; i < ranked.size(); ++i) ranked[i] = SelectedChunk{job.candidates[i].chunk_id, job.scores[i]};
  std::sort(ranked.begin(), ranked.end(), [](const SelectedChunk& a, const SelectedChunk& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.chunk_id < b.chunk_id;
  });
  ranked.resize(std::min(ranked.size(), config_.keep_m));
  std::vector<Document> docs;
  for (const auto& s : ranked) docs.push_back(document(s.chunk_id));
  job.response.selected = std::move(ranked);
  job.response.prompt = assemble_prompt(job.question, docs);
  job.response.timings.select_ms = ms_since(t0);
}

RagResponse Pipeline::handle_query(const std::string& query_id, const std::string& question) const {
  Job job;
  job.query_id = query_id;
  job.question = question;
  job.admitted = Clock::now();
  retrieve(job);
  fetch(job);
  Job* one[] = {&job};
  rerank(one);
  select(job);
  job.response.timings.total_ms = ms_since(job.admitted);
  return std::move(job.response);
}

WorkloadResult Pipeline::run_workload(std::span<const Query> queries, std::size_t warmup) const {
  if (queries.empty()) throw Error(ErrorCode::kInvalidConfig, "workload is empty");
  if (warmup >= queries.size())
    throw Error(ErrorCode::kInvalidConfig, "warmup must be smaller than the number of queries");
  WorkloadResult out;
  out.responses.reserve(queries.size());
  if (warmup > 0) {
    auto w = run_staged(queries, 0, warmup);
    for (auto& r : w.responses) out.responses.push_back(std::move(r));
  }
  auto m = run_staged(queries, warmup, queries.size() - warmup);
  for (auto& r : m.responses) out.responses.push_back(std::move(r));
  out.metrics = std::move(m.metrics);
  out.metrics.warmup = warmup;
  return out;
}

namespace {

// Per-worker accumulators, merged once the stage has drained.
struct StageTotals {
  CounterReport counters;
  std::uint64_t pairs = 0;
  std::uint64_t bytes_fetched = 0;
  std::uint64_t misses = 0;
};

}  // namespace

WorkloadResult Pipeline::run_staged(std::span<const Query> queries, std::size_t first, std::size_t count) const {
  using JobPtr = std::unique_ptr<Job>;
  const std::size_t cap = config_.queue_capacity;
  BoundedQueue<JobPtr> to_fetch(cap), to_batch(cap), to_select(cap);
  BoundedQueue<std::vector<JobPtr>> to_rerank(cap);

  std::mutex err_mu;
  std::exception_ptr first_error;
  auto fail = [&](std::exception_ptr e) {
    {
      std::lock_guard lock(err_mu);
      if (!first_error) first_error = e;
    }
    to_fetch.close();
    to_batch.close();
    to_rerank.close();
    to_select.close();
  };

  std::mutex flight_mu;
  std::condition_variable flight_cv;
  std::size_t in_flight = 0;
  bool aborted = false;

  WorkloadResult result;
  result.responses.resize(count);
  std::vector<StageTotals> fetch_totals(config_.fetch_workers), rerank_totals(config_.rerank_workers);
  std::map<std::size_t, std::size_t> shard_hist;

  const auto start = Clock::now();
  std::vector<std::thread> threads;

  threads.emplace_back([&] {
    try {
      for (std::size_t i = 0; i < count; ++i) {
        if (config_.single_in_flight) {
          std::unique_lock lock(flight_mu);
          flight_cv.wait(lock, [&] { return in_flight == 0 || aborted; });
          if (aborted) break;
          ++in_flight;
        }
        auto job = std::make_unique<Job>();
        job->slot = i;
        job->query_id = queries[first + i].id;
        job->question = queries[first + i].question;
        job->admitted = Clock::now();
        retrieve(*job);
        if (!to_fetch.push(std::move(job))) break;
      }
    } catch (...) {
      fail(std::current_exception());
    }
    to_fetch.close();
  });

  std::atomic<std::size_t> fetch_active{config_.fetch_workers};
  for (std::size_t w = 0; w < config_.fetch_workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        while (auto job = to_fetch.pop()) {
          fetch(**job);
          fetch_totals[w].bytes_fetched += (*job)->response.bytes_fetched;
          fetch_totals[w].misses += (*job)->response.cache_misses;
          if (!to_batch.push(std::move(*job))) break;
        }
      } catch (...) {
        fail(std::current_exception());
      }
      if (--fetch_active == 0) to_batch.close();
    });
  }

  threads.emplace_back([&] {
    try {
      while (auto head = to_batch.pop()) {
        std::vector<JobPtr> group;
        std::size_t pairs = (*head)->candidates.size();
        group.push_back(std::move(*head));
        if (!config_.single_in_flight) {
          const auto deadline = Clock::now() + config_.max_wait;
          while (pairs < config_.max_batch) {
            auto next = to_batch.pop_until(deadline);
            if (!next) break;
            pairs += (*next)->candidates.size();
            group.push_back(std::move(*next));
          }
        }
        if (!to_rerank.push(std::move(group))) break;
      }
    } catch (...) {
      fail(std::current_exception());
    }
    to_rerank.close();
  });

  std::atomic<std::size_t> rerank_active{config_.rerank_workers};
  for (std::size_t w = 0; w < config_.rerank_workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        while (auto group = to_rerank.pop()) {
          std::vector<Job*> ptrs;
          for (auto& j : *group) ptrs.push_back(j.get());
          rerank(ptrs);
          for (auto& j : *group) {
            rerank_totals[w].counters += j->response.counters;
            rerank_totals[w].pairs += j->candidates.size();
            if (!to_select.push(std::move(j))) break;
          }
        }
      } catch (...) {
        fail(std::current_exception());
      }
      if (--rerank_active == 0) to_select.close();
    });
  }

  threads.emplace_back([&] {
    try {
      while (auto job = to_select.pop()) {
        select(**job);
        auto& r = (*job)->response;
        r.timings.total_ms = ms_since((*job)->admitted);
        ++shard_hist[r.shards_touched];
        result.responses[(*job)->slot] = std::move(r);
        if (config_.single_in_flight) {
          std::lock_guard lock(flight_mu);
          --in_flight;
          flight_cv.notify_all();
        }
      }
    } catch (...) {
      fail(std::current_exception());
    }
    std::lock_guard lock(flight_mu);
    aborted = true;  // releases the admission thread if it is still waiting
    flight_cv.notify_all();
  });

  for (auto& t : threads) t.join();
  const double wall_s = std::chrono::duration<double>(Clock::now() - start).count();
  if (first_error) std::rethrow_exception(first_error);

  auto& m = result.metrics;
  m.mode = std::string(to_string(config_.rerank_mode));
  m.queries = count;
  m.wall_s = wall_s;
  m.throughput_qps = wall_s > 0.0 ? static_cast<double>(count) / wall_s : 0.0;
  for (const auto& t : fetch_totals) {
    m.bytes_fetched += t.bytes_fetched;
    m.cache_misses += t.misses;
  }
  for (const auto& t : rerank_totals) {
    m.counters += t.counters;
    m.pairs_scored += t.pairs;
  }
  m.shards_touched = std::move(shard_hist);
  std::vector<double> re, fe, rr, se, to;
  for (const auto& r : result.responses) {
    re.push_back(r.timings.retrieve_ms);
    fe.push_back(r.timings.fetch_ms);
    rr.push_back(r.timings.rerank_ms);
    se.push_back(r.timings.select_ms);
    to.push_back(r.timings.total_ms);
  }
  m.retrieve = summarize_latency(re);
  m.fetch = summarize_latency(fe);
  m.rerank = summarize_latency(rr);
  m.select = summarize_latency(se);
  m.total = summarize_latency(to);
  m.document_len = config_.layout.document_len;
  m.query_len = config_.layout.query_len;
  m.max_batch = config_.max_batch;
  m.rerank_workers = config_.rerank_workers;
  m.fetch_workers = config_.fetch_workers;
  m.retrieve_k = config_.retrieve_k;
  m.nprobe = config_.nprobe;
  m.quant = std::string(to_string(config_.quant));
  return result;
}

}  // namespace hyperrag
