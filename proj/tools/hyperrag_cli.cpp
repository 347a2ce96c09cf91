// hyperrag: corpus generation, build, verification, benchmarks, the remote
// KV shard server and one-shot queries.

#include <atomic>
#include <csignal>
#include <cstdio>
#include <iostream>
#include <thread>

#include <CLI11.hpp>

#include "hyperrag/app.hpp"
#include "hyperrag/error.hpp"
#include "hyperrag/kv_server.hpp"

namespace {

using namespace hyperrag;

std::atomic<bool> g_stop{false};

void on_signal(int) { g_stop = true; }

struct Common {
  std::uint64_t seed = 0;
  std::string config;
  std::string format = "json";
};

void add_common(CLI::App* cmd, Common& c, bool with_format) {
  cmd->add_option("--seed", c.seed, "Seed for every randomized step")->capture_default_str();
  cmd->add_option("--config", c.config, "JSON file with model/layout/pipeline/build overrides")
      ->check(CLI::ExistingFile);
  if (with_format)
    cmd->add_option("--format", c.format, "Output format")->check(CLI::IsMember({"json", "csv"}))->capture_default_str();
}

app::Overrides load_overrides(const Common& c) {
  app::Overrides o;
  if (!c.config.empty()) app::apply_config_file(c.config, o);
  return o;
}

std::vector<ScoreMode> parse_modes(const std::vector<std::string>& names) {
  std::vector<ScoreMode> out;
  for (const auto& n : names) out.push_back(parse_score_mode(n));
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App cli{"HyperRAG cached-reranking toolkit"};
  cli.require_subcommand(1);

  // gen-corpus
  Common gc;
  std::size_t gen_count = 1000, gen_words = 200, gen_queries = 0, gen_query_words = 16;
  std::string gen_out, gen_workload_out;
  auto* gen = cli.add_subcommand("gen-corpus", "Write a synthetic JSONL corpus (and optionally a workload)");
  gen->add_option("--count", gen_count, "Number of documents")->capture_default_str();
  gen->add_option("--words-per-doc", gen_words, "Words per document")->capture_default_str();
  gen->add_option("--out", gen_out, "Corpus output path")->required();
  gen->add_option("--queries", gen_queries, "Also write this many workload queries");
  gen->add_option("--query-words", gen_query_words, "Words per generated query")->capture_default_str();
  gen->add_option("--workload-out", gen_workload_out, "Workload output path");
  add_common(gen, gc, false);

  // build
  Common bc;
  std::string build_corpus, build_out, build_store, build_scheme;
  std::size_t build_nlist = 0, build_shards = 0, build_doc_len = 0, build_query_len = 0;
  auto* build = cli.add_subcommand("build", "Train the IVF index, prefill and store every chunk's KV");
  build->add_option("--corpus", build_corpus, "Corpus JSONL")->required()->check(CLI::ExistingFile);
  build->add_option("--out", build_out, "Output directory")->required();
  build->add_option("--nlist", build_nlist, "IVF lists (default 64)");
  build->add_option("--num-shards", build_shards, "KV shards (default 4)");
  build->add_option("--scheme", build_scheme, "KV encoding")->check(CLI::IsMember({"f32", "int8", "int4"}));
  build->add_option("--document-len", build_doc_len, "Document tokens (default 256)");
  build->add_option("--query-len", build_query_len, "Query tokens (default 48)");
  build->add_option("--store", build_store, "Store location: dir:<path>, tcp://host:port (default dir:<out>/kv)");
  add_common(build, bc, true);

  // verify
  Common vc;
  std::string verify_built, verify_store;
  std::size_t verify_trials = 1000;
  auto* verify = cli.add_subcommand("verify", "Check losslessness, codec roundtrips, placement and locality");
  verify->add_option("--built", verify_built, "Build directory")->required();
  verify->add_option("--trials", verify_trials, "Sampled (document, query) pairs")->capture_default_str();
  verify->add_option("--store", verify_store, "Override the manifest's store location");
  add_common(verify, vc, true);

  // bench
  Common benc;
  app::BenchSpec spec;
  std::string bench_built, bench_workload, bench_report, bench_store;
  std::vector<std::string> bench_modes{"full", "reuse"};
  auto* bench = cli.add_subcommand("bench", "Document-length and batch sweep plus pipeline throughput runs");
  bench->add_option("--built", bench_built, "Build directory")->required();
  bench->add_option("--workload", bench_workload, "Workload JSONL")->required()->check(CLI::ExistingFile);
  bench->add_option("--report", bench_report, "Report directory")->required();
  bench->add_option("--document-lens", spec.document_lens, "Document length sweep")->delimiter(',')->capture_default_str();
  bench->add_option("--query-len", spec.query_len, "Query length")->capture_default_str();
  bench->add_option("--batches", spec.batch_sizes, "Batch size sweep")->delimiter(',')->capture_default_str();
  bench->add_option("--modes", bench_modes, "Rerank modes")->delimiter(',')->capture_default_str();
  bench->add_option("--repetitions", spec.repetitions, "Timed repetitions per point")->capture_default_str();
  bench->add_option("--threads", spec.threads, "OpenMP threads for the sweep (0 = all)")->capture_default_str();
  bench->add_option("--pipeline-queries", spec.pipeline_queries, "Queries per pipeline run")->capture_default_str();
  bench->add_option("--pipeline-warmup", spec.pipeline_warmup, "Warmup queries per pipeline run")->capture_default_str();
  bench->add_option("--rerank-workers", spec.rerank_workers, "Rerank workers in pipeline runs")->capture_default_str();
  bench->add_option("--store", bench_store, "Override the manifest's store location");
  add_common(bench, benc, true);

  // kv-server
  Common sc;
  std::string server_bind = "127.0.0.1:7070", server_root;
  auto* server = cli.add_subcommand("kv-server", "Serve a KV directory over the wire protocol");
  server->add_option("--bind", server_bind, "host:port (port 0 picks a free port)")->capture_default_str();
  server->add_option("--root", server_root, "Store directory (shard<k>/ subdirectories)")
      ->required()
      ->check(CLI::ExistingDirectory);
  add_common(server, sc, false);

  // query
  Common qc;
  std::string query_built, query_text, query_store, query_mode;
  std::size_t query_k = 0, query_m = 0, query_nprobe = 0;
  auto* query = cli.add_subcommand("query", "Run one query through the pipeline and print the response");
  query->add_option("--built", query_built, "Build directory")->required();
  query->add_option("--question", query_text, "Question text")->required();
  query->add_option("--retrieve-k", query_k, "Candidates to rerank (default 20)");
  query->add_option("--keep-m", query_m, "Chunks to keep (default 1)");
  query->add_option("--nprobe", query_nprobe, "IVF lists to probe (default 4)");
  query->add_option("--mode", query_mode, "Rerank mode")->check(CLI::IsMember({"full", "reuse"}));
  query->add_option("--store", query_store, "Override the manifest's store location");
  add_common(query, qc, true);

  try {
    cli.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return cli.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      app::cmd_gen_corpus(gen_count, gen_words, gc.seed, gen_out);
      if (gen_queries > 0) {
        if (gen_workload_out.empty()) throw Error(ErrorCode::kUsage, "--queries needs --workload-out");
        const auto docs = read_corpus(gen_out);
        write_workload(gen_workload_out, app::generate_workload(docs, gen_queries, gen_query_words, gc.seed));
      }
      return 0;
    }

    if (build->parsed()) {
      auto o = load_overrides(bc);
      app::BuildOptions opts;
      opts.model = o.model;
      opts.layout = o.layout;
      opts.nlist = build_nlist ? build_nlist : o.nlist;
      opts.num_shards = build_shards ? build_shards : o.num_shards;
      opts.embed_dim = o.embed_dim;
      opts.scheme = build_scheme.empty() ? o.scheme : parse_quant_scheme(build_scheme);
      if (build_doc_len) opts.layout.document_len = build_doc_len;
      if (build_query_len) opts.layout.query_len = build_query_len;
      opts.seed = bc.seed;
      opts.store_location = build_store;
      const auto m = app::cmd_build(build_corpus, build_out, opts);
      if (bc.format == "csv") {
        std::cout << "entries,payload_bytes_per_entry,total_entry_bytes,nlist,num_shards,scheme\n"
                  << m.entries.size() << ',' << m.payload_bytes << ',' << m.total_entry_bytes << ',' << m.nlist
                  << ',' << m.num_shards << ',' << to_string(m.scheme) << '\n';
      } else {
        std::cout << "{\"entries\": " << m.entries.size() << ", \"payload_bytes_per_entry\": " << m.payload_bytes
                  << ", \"total_entry_bytes\": " << m.total_entry_bytes << "}\n";
      }
      return 0;
    }

    if (verify->parsed()) {
      const auto rep = app::cmd_verify(verify_built, verify_trials, vc.seed, verify_store);
      if (vc.format == "csv") {
        std::cout << "ok,trials,entries_checked,reencoded,lossless_pairs,locality_queries,failures\n"
                  << (rep.ok() ? "true" : "false") << ',' << rep.trials << ',' << rep.entries_checked << ','
                  << rep.reencoded << ',' << rep.lossless_pairs << ',' << rep.locality_queries << ','
                  << rep.failures.size() << '\n';
      } else {
        std::cout << rep.to_json() << '\n';
      }
      for (const auto& f : rep.failures) std::cerr << "FAIL " << f << '\n';
      return rep.ok() ? 0 : 1;
    }

    if (bench->parsed()) {
      spec.modes = parse_modes(bench_modes);
      spec.seed = benc.seed;
      const auto rep = app::cmd_bench(bench_built, spec, bench_workload, bench_report, bench_store);
      if (benc.format == "csv") {
        std::cout << app::SweepRow::csv_header() << '\n';
        for (const auto& r : rep.sweep) std::cout << r.to_csv_row() << '\n';
      } else {
        std::cout << rep.to_json();
      }
      return 0;
    }

    if (server->parsed()) {
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      KvServer srv(std::make_shared<DirectoryBackend>(server_root));
      srv.start(server_bind);
      std::cout << "listening on " << server_bind.substr(0, server_bind.rfind(':')) << ':' << srv.port() << std::endl;
      while (!g_stop) std::this_thread::sleep_for(std::chrono::milliseconds(50));
      srv.stop();
      std::cout << "stopped after " << srv.connections_served() << " connections" << std::endl;
      return 0;
    }

    if (query->parsed()) {
      auto o = load_overrides(qc);
      PipelineConfig pc = o.pipeline;
      if (query_k) pc.retrieve_k = query_k;
      if (query_m) pc.keep_m = query_m;
      if (query_nprobe) pc.nprobe = query_nprobe;
      if (!query_mode.empty()) pc.rerank_mode = parse_score_mode(query_mode);
      const auto r = app::cmd_query(query_built, query_text, pc, query_store);
      if (qc.format == "csv") {
        std::cout << "query_id,rank,chunk_id,score\n";
        for (std::size_t i = 0; i < r.selected.size(); ++i)
          std::cout << r.query_id << ',' << i + 1 << ',' << r.selected[i].chunk_id << ',' << r.selected[i].score
                    << '\n';
      } else {
        std::cout << app::response_to_json(r) << '\n';
      }
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::kUsage || e.code() == ErrorCode::kInvalidConfig ? 2 : 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 0;
}
