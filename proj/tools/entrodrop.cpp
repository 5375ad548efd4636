// entrodrop: command-line front end for entropy-based block pruning.
//
//   entrodrop trace     build (and optionally train) a toy model, capture an ETRC trace
//   entrodrop analyze   entropy profile of a trace: CSV + SVG curve
//   entrodrop plan      pruning plan JSON from a trace or a profile CSV
//   entrodrop evaluate  perplexity before/after for every prefix of a plan
//   entrodrop bench     generation timing for prefixes of a plan
//
// Exit codes: 0 success, 2 usage, 3 I/O or malformed input, 4 domain constraint.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "entrodrop/entrodrop.hpp"

using namespace entrodrop;
using json = nlohmann::ordered_json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitIo = 3;
constexpr int kExitDomain = 4;

struct GlobalOptions {
  std::uint64_t seed = 42;
  std::size_t threads = default_thread_count();
  std::string out;
};

struct ModelOptions {
  std::size_t layers = 8;
  std::size_t hidden = 64;
  std::size_t heads = 4;
  std::size_t ffn = 256;
  std::size_t vocab = 256;
  std::size_t max_seq = 128;
  std::size_t train_steps = 0;
  double lr = 0.1;
  std::size_t batch = 4;
  std::size_t plant_attention = 0;
  double plant_scale = 1e-4;
  std::string model_path;
  std::string save_model;
};

struct CorpusOptions {
  std::string kind = "repetition";
  std::size_t period = 8;
  double noise = 0.05;
  std::size_t order = 1;
  std::size_t branching = 4;
  std::optional<std::uint64_t> corpus_seed;
  std::size_t train_sequences = 64;
  std::size_t sequences = 16;
  std::size_t seq_len = 128;
  std::string corpus_file;
};

struct EstimatorOptions {
  std::string kind = "bucket";
  std::size_t bins = 40;
  std::size_t k = 25;
  double alpha = 2.0;
  std::size_t max_tokens = 4096;
  std::uint64_t sample_seed = 0;
};

void add_model_flags(CLI::App* cmd, ModelOptions& m) {
  auto g = "Model";
  cmd->add_option("--layers", m.layers, "Transformer layers")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--hidden", m.hidden, "Hidden dimension")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--heads", m.heads, "Attention heads")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--ffn", m.ffn, "MLP inner dimension")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--vocab", m.vocab, "Vocabulary size")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--max-seq", m.max_seq, "Maximum sequence length")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--train-steps", m.train_steps, "Gradient-descent steps on the training corpus")->group(g);
  cmd->add_option("--lr", m.lr, "Learning rate")->check(CLI::NonNegativeNumber)->group(g);
  cmd->add_option("--batch", m.batch, "Sequences per training step")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--plant-attention", m.plant_attention,
                  "Scale this layer's (1-based) attention output projection by --plant-scale; 0 = none")
      ->group(g);
  cmd->add_option("--plant-scale", m.plant_scale, "Factor applied by --plant-attention")->group(g);
  cmd->add_option("--model", m.model_path, "Load an ETCK checkpoint instead of building from flags")->group(g);
  cmd->add_option("--save-model", m.save_model, "Write the resulting model as an ETCK checkpoint")->group(g);
}

void add_corpus_flags(CLI::App* cmd, CorpusOptions& c) {
  auto g = "Corpus";
  cmd->add_option("--corpus", c.kind, "Synthetic generator")
      ->check(CLI::IsMember({"repetition", "markov"}))
      ->group(g);
  cmd->add_option("--period", c.period, "Repetition period")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--noise", c.noise, "Repetition noise probability")->check(CLI::Range(0.0, 1.0))->group(g);
  cmd->add_option("--order", c.order, "Markov order")->group(g);
  cmd->add_option("--branching", c.branching, "Markov successors per context")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--corpus-seed", c.corpus_seed, "Generator seed (default: --seed)")->group(g);
  cmd->add_option("--train-sequences", c.train_sequences, "Training sequences")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--sequences", c.sequences, "Calibration/evaluation sequences")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--seq-len", c.seq_len, "Tokens per corpus sequence")->check(CLI::Range(2, 1 << 20))->group(g);
  cmd->add_option("--corpus-file", c.corpus_file, "Read calibration/evaluation sequences from a token file")->group(g);
}

void add_estimator_flags(CLI::App* cmd, EstimatorOptions& e) {
  auto g = "Estimator";
  cmd->add_option("--estimator", e.kind, "Entropy estimator")->check(CLI::IsMember({"bucket", "knn", "renyi"}))->group(g);
  cmd->add_option("--bins", e.bins, "Histogram bins (bucket, renyi)")->group(g);
  cmd->add_option("--knn", e.k, "Nearest neighbours (knn)")->group(g);
  cmd->add_option("--alpha", e.alpha, "Renyi order")->group(g);
  cmd->add_option("--max-tokens", e.max_tokens, "Token subsample cap")->check(CLI::PositiveNumber)->group(g);
  cmd->add_option("--sample-seed", e.sample_seed, "Subsampling seed")->group(g);
}

EstimatorConfig make_estimator(const EstimatorOptions& e) {
  EstimatorConfig c = e.kind == "bucket" ? EstimatorConfig::bucket(e.bins)
                      : e.kind == "knn"  ? EstimatorConfig::knn(e.k)
                                         : EstimatorConfig::renyi(e.alpha, e.bins);
  c.sample_policy = {e.max_tokens, e.sample_seed};
  validate(c);
  return c;
}

json to_json(const ModelOptions& m) {
  return {{"layers", m.layers},           {"hidden", m.hidden},       {"heads", m.heads},
          {"ffn", m.ffn},                 {"vocab", m.vocab},         {"max_seq", m.max_seq},
          {"train_steps", m.train_steps}, {"lr", m.lr},               {"batch", m.batch},
          {"plant_attention", m.plant_attention}, {"plant_scale", m.plant_scale},
          {"model", m.model_path},        {"save_model", m.save_model}};
}

json to_json(const CorpusOptions& c, std::uint64_t seed) {
  return {{"corpus", c.kind},
          {"period", c.period},
          {"noise", c.noise},
          {"order", c.order},
          {"branching", c.branching},
          {"corpus_seed", c.corpus_seed.value_or(seed)},
          {"train_sequences", c.train_sequences},
          {"sequences", c.sequences},
          {"seq_len", c.seq_len},
          {"corpus_file", c.corpus_file}};
}

CorpusGenerator make_generator(const CorpusOptions& c, std::uint64_t seed) {
  const std::uint64_t s = c.corpus_seed.value_or(seed);
  if (c.kind == "markov") return MarkovSource{c.order, c.branching, s};
  return RepetitionSource{c.period, c.noise, s};
}

/// Training sequences come first from the generator; calibration/evaluation
/// sequences are the ones that follow, so the two never overlap.
std::pair<SyntheticCorpus, SyntheticCorpus> make_corpora(const CorpusOptions& c, std::size_t vocab, std::uint64_t seed) {
  const std::size_t train_n = c.train_sequences;
  SyntheticCorpus all = make_corpus(make_generator(c, seed), vocab, train_n + c.sequences, c.seq_len);
  SyntheticCorpus train{vocab, {}}, eval{vocab, {}};
  train.sequences.assign(all.sequences.begin(), all.sequences.begin() + static_cast<std::ptrdiff_t>(train_n));
  eval.sequences.assign(all.sequences.begin() + static_cast<std::ptrdiff_t>(train_n), all.sequences.end());
  if (!c.corpus_file.empty()) eval = load_corpus(c.corpus_file, vocab);
  return {std::move(train), std::move(eval)};
}

std::string source_description(const CorpusOptions& c, std::uint64_t seed) {
  if (!c.corpus_file.empty()) return "file:" + c.corpus_file;
  const auto s = std::to_string(c.corpus_seed.value_or(seed));
  if (c.kind == "markov")
    return "markov order=" + std::to_string(c.order) + " branching=" + std::to_string(c.branching) + " seed=" + s;
  char noise[32];
  std::snprintf(noise, sizeof noise, "%g", c.noise);
  return "repetition period=" + std::to_string(c.period) + " noise=" + noise + " seed=" + s;
}

/// Loads the checkpoint or builds, trains and plants a model from flags.
/// `min_seq` extends max_seq for flag-built models (position rows are
/// seeded per tensor, so the first rows do not change).
ToyModel build_model(const ModelOptions& m, const CorpusOptions& c, const GlobalOptions& g, std::size_t min_seq = 0) {
  ToyModel model;
  if (!m.model_path.empty()) {
    model = load_checkpoint(m.model_path);
  } else {
    ToyModelConfig config{m.layers, m.hidden, m.heads, m.ffn, m.vocab, std::max(m.max_seq, min_seq), g.seed};
    model = init_model(config);
    if (m.train_steps > 0) {
      const auto [train, eval] = make_corpora(c, m.vocab, g.seed);
      TrainOptions opt;
      opt.steps = m.train_steps;
      opt.lr = m.lr;
      opt.batch_size = m.batch;
      opt.seed = g.seed;
      opt.threads = g.threads;
      const auto report = train_briefly(model, train, opt);
      std::fprintf(stderr, "trained %zu steps: loss %.4f -> %.4f\n", m.train_steps, report.losses.front(),
                   report.losses.back());
    }
  }
  if (m.plant_attention > 0) {
    if (m.plant_attention > model.config.layers)
      throw DomainError("--plant-attention " + std::to_string(m.plant_attention) + " exceeds the model's " +
                        std::to_string(model.config.layers) + " layers");
    scale_attention_output(model, m.plant_attention - 1, m.plant_scale);
  }
  if (!m.save_model.empty()) save_checkpoint(model, m.save_model);
  return model;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  if (!out) throw IoError("failed writing '" + path + "'", 0);
}

template <typename F>
void write_stream(const std::string& path, F&& fill) {
  std::ofstream out(path, std::ios::trunc);
  fill(out);
  if (!out) throw IoError("failed writing '" + path + "'", 0);
}

class ManifestScope {
 public:
  ManifestScope(std::string subcommand, const std::vector<std::string>& argv, const GlobalOptions& g)
      : start_(std::chrono::steady_clock::now()) {
    manifest_.subcommand = std::move(subcommand);
    manifest_.argv = argv;
    manifest_.seed = g.seed;
    manifest_.parameters["seed"] = g.seed;
    manifest_.parameters["threads"] = g.threads;
  }
  RunManifest& get() { return manifest_; }
  void input(const std::string& path) {
    if (!path.empty()) manifest_.inputs.push_back(record_file(path));
  }
  void output(const std::string& path) { manifest_.outputs.push_back(record_file(path)); }
  void finish(const std::string& path) {
    manifest_.wall_clock_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    manifest_.save(path);
  }

 private:
  RunManifest manifest_;
  std::chrono::steady_clock::time_point start_;
};

// ---------------------------------------------------------------------------

int run_trace(const GlobalOptions& g, const ModelOptions& m, const CorpusOptions& c, const std::vector<std::string>& argv) {
  const std::string out = g.out.empty() ? "trace.etrc" : g.out;
  ManifestScope scope("trace", argv, g);
  scope.get().parameters["model"] = to_json(m);
  scope.get().parameters["corpus"] = to_json(c, g.seed);
  scope.input(m.model_path);
  scope.input(c.corpus_file);
  const ToyModel model = build_model(m, c, g);
  const auto eval = make_corpora(c, model.config.vocab, g.seed).second;
  const auto trace =
      calibration_trace(model, eval, BlockMask::none(model.config.layers), source_description(c, g.seed), g.threads);
  save_trace(trace, out);
  std::printf("wrote %s: %zu snapshots x %zu tokens x %zu dims (weights crc32 %08x)\n", out.c_str(),
              trace.snapshots.size(), trace.token_count, trace.hidden_dim, weight_checksum(model));
  scope.output(out);
  if (!m.save_model.empty()) scope.output(m.save_model);
  scope.finish(out + ".manifest.json");
  return kExitOk;
}

std::string profile_chart(const EntropyProfile& profile, const std::string& title) {
  svg::Series h{"H(Z) per snapshot", {}, {}}, dh{"entropy increase per block", {}, {}};
  for (std::size_t i = 0; i < profile.h_values.size(); ++i) {
    h.x.push_back(static_cast<double>(i) / 2.0);
    h.y.push_back(profile.h_values[i]);
  }
  for (std::size_t l = 1; l <= profile.block_count; ++l) {
    dh.x.push_back(static_cast<double>(l));
    dh.y.push_back(profile.delta_h[l - 1]);
  }
  return svg::line_chart(title, "layer", "nats", {h, dh});
}

int run_analyze(const GlobalOptions& g, const std::string& trace_path, const EstimatorOptions& e,
                const std::string& granularity, const std::vector<std::size_t>& sweep_bins,
                const std::vector<std::size_t>& sweep_k, const std::vector<std::string>& argv) {
  const std::string prefix = g.out.empty() ? "profile" : g.out;
  ManifestScope scope("analyze", argv, g);
  const EstimatorConfig config = make_estimator(e);
  const Granularity gran = parse_granularity(granularity);
  scope.get().parameters["estimator"] = describe(config);
  scope.get().parameters["granularity"] = granularity;
  scope.input(trace_path);
  const ActivationTrace trace = load_trace(trace_path);
  const EntropyProfile profile = build_profile(trace, config, gran, g.threads);
  const PruningPlan plan = make_plan(profile, 0);

  write_stream(prefix + ".csv", [&](std::ostream& os) { write_profile_csv(os, profile, plan); });
  write_text(prefix + ".svg", profile_chart(profile, "Entropy dynamics (" + describe(config) + ")"));
  scope.output(prefix + ".csv");
  scope.output(prefix + ".svg");
  std::printf("%-6s %-15s %14s %14s\n", "block", "position", "h_nats", "delta_h_nats");
  for (std::size_t i = 0; i < profile.h_values.size(); ++i) {
    const auto label = expected_label(i);
    const std::size_t layer = i == 0 ? 0 : label.layer_index + 1;
    std::printf("%-6zu %-15s %14.6f", layer, to_string(label.position), profile.h_values[i]);
    if (i > 0 && block_output(gran, layer) == i) std::printf(" %14.6f", profile.delta_h[layer - 1]);
    std::printf("\n");
  }
  std::printf("s_start = %zu\n", plan.s_start);

  if (!sweep_bins.empty() || !sweep_k.empty()) {
    std::vector<EstimatorConfig> grid;
    for (auto b : sweep_bins) {
      auto c = e.kind == "renyi" ? EstimatorConfig::renyi(e.alpha, b) : EstimatorConfig::bucket(b);
      c.sample_policy = config.sample_policy;
      grid.push_back(c);
    }
    for (auto k : sweep_k) {
      auto c = EstimatorConfig::knn(k);
      c.sample_policy = config.sample_policy;
      grid.push_back(c);
    }
    const auto result = sweep(trace, grid, gran, 0, std::nullopt, g.threads);
    write_stream(prefix + ".sweep.csv", [&](std::ostream& os) { write_sweep_csv(os, result); });
    write_stream(prefix + ".correlation.csv", [&](std::ostream& os) { write_correlation_csv(os, result); });
    scope.output(prefix + ".sweep.csv");
    scope.output(prefix + ".correlation.csv");
    for (const auto& entry : result.entries)
      if (!entry.error.empty()) std::fprintf(stderr, "sweep entry '%s' failed: %s\n", describe(entry.config).c_str(), entry.error.c_str());
  }
  scope.finish(prefix + ".manifest.json");
  return kExitOk;
}

int run_plan(const GlobalOptions& g, const std::string& trace_path, const std::string& profile_path,
             const EstimatorOptions& e, const std::string& criterion, std::size_t k, const std::string& granularity,
             std::optional<std::size_t> s_start, const std::vector<std::string>& argv) {
  const std::string out = g.out.empty() ? "plan.json" : g.out;
  ManifestScope scope("plan", argv, g);
  const Criterion crit = parse_criterion(criterion);
  const Granularity gran = parse_granularity(granularity);
  scope.get().parameters["criterion"] = criterion;
  scope.get().parameters["k"] = k;
  scope.get().parameters["granularity"] = granularity;
  scope.get().parameters["s_start"] = s_start ? json(*s_start) : json(nullptr);

  PruningPlan plan;
  if (!profile_path.empty()) {
    if (crit != Criterion::EntropyIncrease) throw DomainError("the cosine criterion needs --trace, not --profile");
    scope.input(profile_path);
    std::ifstream in(profile_path);
    if (!in) throw IoError("cannot open profile '" + profile_path + "'", 0);
    const EntropyProfile profile = with_granularity(read_profile_csv(in), gran);
    scope.get().parameters["estimator"] = describe(profile.estimator);
    plan = make_plan(profile, k, s_start);
  } else {
    scope.input(trace_path);
    const ActivationTrace trace = load_trace(trace_path);
    if (crit == Criterion::CosineDistance) {
      const CosineReport report = cosine_importance(trace, gran);
      for (std::size_t b = 0; b < report.excluded_tokens.size(); ++b)
        if (report.excluded_tokens[b] > 0)
          std::fprintf(stderr, "cosine: block %zu: %zu zero-norm tokens excluded\n", b + 1, report.excluded_tokens[b]);
      plan = make_plan(report, k, s_start);
    } else {
      const EstimatorConfig config = make_estimator(e);
      scope.get().parameters["estimator"] = describe(config);
      plan = make_plan(build_profile(trace, config, gran, g.threads), k, s_start);
    }
  }
  save_plan(plan, out);
  scope.output(out);
  std::printf("%s plan, %s granularity, s_start = %zu, k = %zu\n", to_string(plan.criterion),
              to_string(plan.granularity), plan.s_start, plan.k);
  std::printf("%-5s %-6s %16s %s\n", "rank", "block", "score", "");
  for (std::size_t i = 0; i < plan.ranked.size(); ++i)
    std::printf("%-5zu %-6zu %16.8f %s\n", i + 1, plan.ranked[i], plan.ranked_scores[i], i < plan.k ? "pruned" : "");
  scope.finish(out + ".manifest.json");
  return kExitOk;
}

int run_evaluate(const GlobalOptions& g, const ModelOptions& m, const CorpusOptions& c, const std::string& plan_path,
                 std::optional<std::size_t> max_k, std::size_t random_plans, const std::vector<std::string>& argv) {
  const std::string out = g.out.empty() ? "evaluate.csv" : g.out;
  ManifestScope scope("evaluate", argv, g);
  scope.get().parameters["model"] = to_json(m);
  scope.get().parameters["corpus"] = to_json(c, g.seed);
  scope.get().parameters["random_plans"] = random_plans;
  scope.input(plan_path);
  scope.input(m.model_path);
  scope.input(c.corpus_file);
  const PruningPlan plan = load_plan(plan_path);
  const ToyModel model = build_model(m, c, g);
  if (plan.block_count != model.config.layers)
    throw DomainError("plan covers " + std::to_string(plan.block_count) + " blocks but the model has " +
                      std::to_string(model.config.layers) + " layers");
  const auto eval = make_corpora(c, model.config.vocab, g.seed).second;
  const std::size_t K = max_k.value_or(plan.k > 0 ? plan.k : plan.ranked.size());
  scope.get().parameters["max_k"] = K;

  std::vector<std::pair<std::string, std::vector<DegradationRow>>> tables;
  tables.emplace_back(to_string(plan.criterion), evaluate_prefixes(model, plan, eval, K, g.threads));
  for (std::size_t s = 1; s <= random_plans; ++s)
    tables.emplace_back("random:" + std::to_string(s), evaluate_prefixes(model, random_plan(plan, s), eval, K, g.threads));

  write_stream(out, [&](std::ostream& os) {
    os << "plan,k,ppl_before,ppl_after,degradation\n";
    for (const auto& [name, rows] : tables)
      for (const auto& r : rows)
        os << name << ',' << r.k << ',' << detail::format_double(r.ppl_before) << ','
           << detail::format_double(r.ppl_after) << ',' << detail::format_double(r.degradation()) << '\n';
  });
  scope.output(out);
  std::printf("%-4s %14s %14s %12s\n", "k", "ppl_before", "ppl_after", "degradation");
  for (const auto& r : tables.front().second)
    std::printf("%-4zu %14.6f %14.6f %11.4f%%\n", r.k, r.ppl_before, r.ppl_after, 100.0 * r.degradation());
  if (random_plans > 0) {
    for (std::size_t k = 1; k <= K; ++k) {
      std::size_t wins = 0;
      for (std::size_t s = 1; s < tables.size(); ++s)
        wins += tables.front().second[k].degradation() <= tables[s].second[k].degradation();
      std::printf("k=%zu: plan degradation <= random in %zu/%zu seeds\n", k, wins, random_plans);
    }
  }
  scope.finish(out + ".manifest.json");
  return kExitOk;
}

int run_bench(const GlobalOptions& g, const ModelOptions& m, const CorpusOptions& c, const std::string& plan_path,
              std::size_t seq_len, std::size_t gen_len, std::size_t repeats, std::vector<std::size_t> ks,
              const std::vector<std::string>& argv) {
  const std::string prefix = g.out.empty() ? "bench" : g.out;
  ManifestScope scope("bench", argv, g);
  scope.get().parameters["model"] = to_json(m);
  scope.get().parameters["seq_len"] = seq_len;
  scope.get().parameters["gen_len"] = gen_len;
  scope.get().parameters["repeats"] = repeats;
  scope.input(plan_path);
  scope.input(m.model_path);
  const PruningPlan plan = load_plan(plan_path);
  const ToyModel model = build_model(m, c, g, seq_len + gen_len);
  if (ks.empty()) {
    const std::size_t K = plan.k > 0 ? plan.k : plan.ranked.size();
    for (std::size_t k = 0; k <= K; ++k) ks.push_back(k);
  }
  for (std::size_t i = 1; i < ks.size(); ++i)
    if (ks[i] <= ks[i - 1]) throw DomainError("--ks must be strictly increasing");
  scope.get().parameters["ks"] = ks;
  std::vector<BlockMask> masks;
  for (auto k : ks) masks.push_back(mask_from_plan(plan, k, model.config.layers));
  const auto table = bench_inference(model, masks, seq_len, gen_len, repeats, g.seed);

  write_stream(prefix + ".csv", [&](std::ostream& os) {
    os << "k,skipped_blocks,mean_ms,std_ms\n";
    for (std::size_t i = 0; i < table.size(); ++i)
      os << ks[i] << ',' << table[i].skipped_blocks << ',' << detail::format_double(table[i].mean_ms) << ','
         << detail::format_double(table[i].std_ms) << '\n';
  });
  svg::Series series{"mean generation time", {}, {}};
  for (std::size_t i = 0; i < table.size(); ++i) {
    series.x.push_back(static_cast<double>(ks[i]));
    series.y.push_back(table[i].mean_ms);
  }
  write_text(prefix + ".svg", svg::line_chart("Inference time vs pruned blocks (seq " + std::to_string(seq_len) +
                                                  ", gen " + std::to_string(gen_len) + ")",
                                              "pruned blocks k", "ms", {series}));
  scope.output(prefix + ".csv");
  scope.output(prefix + ".svg");
  std::printf("%-4s %12s %12s\n", "k", "mean_ms", "std_ms");
  for (std::size_t i = 0; i < table.size(); ++i) std::printf("%-4zu %12.3f %12.3f\n", ks[i], table[i].mean_ms, table[i].std_ms);
  scope.finish(prefix + ".manifest.json");
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::string> args(argv, argv + argc);
  CLI::App app{"entrodrop: entropy-based pruning of transformer blocks"};
  app.require_subcommand(1);
  GlobalOptions g;
  app.add_option("--seed", g.seed, "Model and corpus seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads for analysis and evaluation")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "Output path (trace, plan, evaluate) or prefix (analyze, bench)");

  ModelOptions model;
  CorpusOptions corpus;
  EstimatorOptions estimator;

  auto* trace = app.add_subcommand("trace", "Build a toy model and capture a calibration trace");
  add_model_flags(trace, model);
  add_corpus_flags(trace, corpus);

  std::string trace_path, profile_path, granularity = "attention", criterion = "entropy", plan_path;
  std::vector<std::size_t> sweep_bins, sweep_k;
  auto* analyze = app.add_subcommand("analyze", "Entropy profile of a trace");
  analyze->add_option("--trace", trace_path, "ETRC trace")->required();
  add_estimator_flags(analyze, estimator);
  analyze->add_option("--granularity", granularity, "layer | attention | mlp")
      ->check(CLI::IsMember({"layer", "attention", "mlp"}));
  analyze->add_option("--sweep-bins", sweep_bins, "Also sweep these bin counts and report rank correlations");
  analyze->add_option("--sweep-knn", sweep_k, "Also sweep these neighbour counts and report rank correlations");

  std::size_t k = 0;
  std::optional<std::size_t> s_start;
  auto* plan = app.add_subcommand("plan", "Rank blocks and select the prune set");
  auto* plan_trace = plan->add_option("--trace", trace_path, "ETRC trace");
  auto* plan_profile = plan->add_option("--profile", profile_path, "Profile CSV written by analyze");
  plan_trace->excludes(plan_profile);
  add_estimator_flags(plan, estimator);
  plan->add_option("--criterion", criterion, "entropy | cosine")->check(CLI::IsMember({"entropy", "cosine"}));
  plan->add_option("--k", k, "Blocks to prune");
  plan->add_option("--granularity", granularity, "layer | attention | mlp")
      ->check(CLI::IsMember({"layer", "attention", "mlp"}));
  plan->add_option("--s-start", s_start, "First prunable block (0 or 1 disables stage-1 protection)");

  std::optional<std::size_t> max_k;
  std::size_t random_plans = 0;
  auto* evaluate = app.add_subcommand("evaluate", "Perplexity for every prefix of a plan");
  add_model_flags(evaluate, model);
  add_corpus_flags(evaluate, corpus);
  evaluate->add_option("--plan", plan_path, "Plan JSON")->required();
  evaluate->add_option("--max-k", max_k, "Largest prefix (default: the plan's k, or the whole ranking)");
  evaluate->add_option("--random-plans", random_plans, "Also evaluate this many seeded random plans");

  std::size_t bench_seq = 1024, bench_gen = 1024, repeats = 10;
  std::vector<std::size_t> ks;
  auto* bench = app.add_subcommand("bench", "Time generation for prefixes of a plan");
  add_model_flags(bench, model);
  bench->add_option("--plan", plan_path, "Plan JSON")->required();
  bench->add_option("--seq-len", bench_seq, "Prompt tokens")->check(CLI::PositiveNumber);
  bench->add_option("--gen-len", bench_gen, "Generated tokens");
  bench->add_option("--repeats", repeats, "Timed runs per prefix")->check(CLI::PositiveNumber);
  bench->add_option("--ks", ks, "Prefix sizes to time (default: 0..k)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }
  if (plan->parsed() && trace_path.empty() && profile_path.empty()) {
    std::cerr << "plan: one of --trace or --profile is required\n";
    return kExitUsage;
  }

  try {
    if (trace->parsed()) return run_trace(g, model, corpus, args);
    if (analyze->parsed()) return run_analyze(g, trace_path, estimator, granularity, sweep_bins, sweep_k, args);
    if (plan->parsed()) return run_plan(g, trace_path, profile_path, estimator, criterion, k, granularity, s_start, args);
    if (evaluate->parsed()) return run_evaluate(g, model, corpus, plan_path, max_k, random_plans, args);
    if (bench->parsed()) return run_bench(g, model, corpus, plan_path, bench_seq, bench_gen, repeats, ks, args);
  } catch (const CapacityError& e) {
    std::cerr << "error: " << e.what() << " (eligible: " << e.eligible() << ")\n";
    return kExitDomain;
  } catch (const ContractViolation& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDomain;
  } catch (const DegenerateInputError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDomain;
  } catch (const TrainingError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitDomain;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitIo;
  }
  return kExitUsage;
}
