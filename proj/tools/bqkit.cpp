// bqkit command-line driver: train, analyze, compress, gwk, eval, report, run.

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "bqkit/bqkit.hpp"

namespace fs = std::filesystem;
using namespace bqkit;

namespace {

constexpr int kRunConfigVersion = 1;

// Parameters of the built-in synthetic tasks.
struct SynthParams {
  std::size_t n_train = 2000;
  std::size_t n_test = 2000;
  std::uint64_t data_seed = 1;
  double noise = 0.9;       // textures
  std::size_t classes = 4;  // blobs
  std::size_t dims = 8;
  double spread = 1.5;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SynthParams, n_train, n_test, data_seed, noise,
                                                classes, dims, spread)

struct MakeDataArgs {
  std::string source = "blobs";
  std::string split = "train";
  SynthParams synth;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(MakeDataArgs, source, split, synth, out)

struct TrainArgs {
  std::string arch = "mlp";
  std::string data = "blobs";
  SynthParams synth;
  std::size_t epochs = 30;
  double lr = 0.02;
  std::size_t batch = 32;
  double momentum = 0.9;
  std::uint64_t seed = 7;
  std::size_t hidden = 32;
  std::string out;
  std::string metrics;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(TrainArgs, arch, data, synth, epochs, lr, batch,
                                                momentum, seed, hidden, out, metrics)

struct AnalyzeArgs {
  std::string model;
  std::string data = "blobs";
  std::string grad_data;  // train-split source for gradients; defaults to `data`
  SynthParams synth;
  std::string mode = "gaussian";
  double std_dev = 0.05;
  double rel = -1.0;  // negative: 0.5 for float layers, 0.03 for u8
  double fraction = 0.5;
  std::size_t seeds = 1;
  std::uint64_t seed = 0;
  std::string layer;  // bins mode; defaults to the largest layer
  std::size_t bins = 8;
  std::size_t eval_samples = 0;  // 0 = whole dataset
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AnalyzeArgs, model, data, grad_data, synth, mode,
                                                std_dev, rel, fraction, seeds, seed, layer, bins,
                                                eval_samples, out)

struct CompressArgs {
  std::string model;
  std::string data = "blobs";
  SynthParams synth;
  std::string variant = "float";
  std::size_t max_bins = 16;
  std::size_t initial_bins = 8;
  double per_bin_drop = 0.02;
  double layer_drop = 0.01;
  std::size_t eval_samples = 1000;
  std::size_t layers = 1;
  bool share_bins = false;
  double rel = -1.0;
  std::uint64_t seed = 0;
  bool huffman = false;
  std::string out;
  std::string report;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(CompressArgs, model, data, synth, variant, max_bins,
                                                initial_bins, per_bin_drop, layer_drop, eval_samples,
                                                layers, share_bins, rel, seed, huffman, out, report)

struct GwkArgs {
  std::string model;
  std::string train_data = "textures";
  std::string test_data;  // defaults to train_data
  SynthParams synth;
  std::size_t cv = 4;
  std::size_t pw = 2;
  std::size_t bits = 4;
  int weight_bits = 8;
  int act_bits = 8;
  double delta = 0.2;
  std::string estimator = "ewgs";
  std::size_t epochs = 6;
  double lr = 0.01;
  std::size_t batch = 32;
  double momentum = 0.9;
  std::uint64_t seed = 7;
  std::size_t cluster_every = 1;
  bool uniform_weights = false;
  bool exempt_first_last = false;
  bool huffman = false;
  std::string out;
  std::string trace;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(GwkArgs, model, train_data, test_data, synth, cv, pw,
                                                bits, weight_bits, act_bits, delta, estimator, epochs,
                                                lr, batch, momentum, seed, cluster_every,
                                                uniform_weights, exempt_first_last, huffman, out, trace)

struct EvalArgs {
  std::string model;
  std::string data = "blobs";
  std::string split = "test";
  SynthParams synth;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(EvalArgs, model, data, split, synth, out)

struct ReportArgs {
  std::vector<std::string> inputs;
  std::string out;
};
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ReportArgs, inputs, out)

// ---------------------------------------------------------------------------

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "test") return Split::Test;
  throw Error("unknown split: " + s);
}

Dataset load_data(const std::string& source, Split split, const SynthParams& p) {
  const std::size_t n = split == Split::Train ? p.n_train : p.n_test;
  if (source == "blobs") return make_blobs(n, p.classes, p.dims, p.spread, p.data_seed, split, p.data_seed);
  if (source == "textures") return make_textures(n, p.data_seed, split, p.noise);
  Dataset d = load_dataset(source);
  if (d.split != split)
    throw Error("dataset " + source + " is a " + to_string(d.split) + " split, expected " +
                to_string(split));
  return d;
}

bool is_bqz(const std::string& path) {
  const Bytes b = read_file(path);
  return b.size() >= 4 && std::equal(b.begin(), b.begin() + 4, "BQZ1");
}

Model load_any_model(const std::string& path) {
  return is_bqz(path) ? read_bqz(path).model : load_model(path);
}

void require_out(const std::string& out, const std::vector<std::string>& inputs) {
  if (out.empty()) throw Error("--out is required");
  for (const auto& in : inputs) {
    if (in.empty() || !fs::exists(in) || !fs::exists(out)) continue;
    if (fs::equivalent(in, out)) throw Error("refusing to overwrite input file " + in);
  }
}

std::string or_default(const std::string& v, const std::string& fallback) {
  return v.empty() ? fallback : v;
}

template <class Args>
void record_run(const std::string& command, const Args& args, const std::string& out) {
  if (out.empty()) return;
  const Json j = {{"tool", "bqkit"}, {"version", kRunConfigVersion}, {"command", command}, {"args", args}};
  write_text_atomic(out + ".run.json", j.dump(2) + "\n");
}

std::string fmt(double v) { return format_double(v); }

// ---------------------------------------------------------------------------

int cmd_make_data(const MakeDataArgs& a) {
  require_out(a.out, {});
  const Dataset d = load_data(a.source, parse_split(a.split), a.synth);
  save_dataset(d, a.out);
  record_run("make-data", a, a.out);
  std::printf("wrote %s (%zu samples)\n", a.out.c_str(), d.size());
  return 0;
}

int cmd_train(const TrainArgs& a) {
  require_out(a.out, {a.data});
  const Dataset data = load_data(a.data, Split::Train, a.synth);
  Model model;
  if (a.arch == "mlp") {
    if (data.sample_shape.size() != 1) throw Error("mlp needs flat inputs");
    model = make_mlp(data.sample_shape[0], a.hidden, data.num_classes, a.seed);
  } else if (a.arch == "cnn" || a.arch == "two-conv") {
    if (data.sample_shape.size() != 3 || data.sample_shape[0] != 1)
      throw Error(a.arch + " needs [1, side, side] inputs");
    const std::size_t side = data.sample_shape[1];
    model = a.arch == "cnn" ? make_cnn(side, data.num_classes, a.seed)
                            : make_two_conv(side, data.num_classes, a.seed);
  } else {
    throw Error("unknown arch: " + a.arch);
  }
  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.learning_rate = a.lr;
  cfg.batch_size = a.batch;
  cfg.momentum = a.momentum;
  cfg.seed = a.seed;
  cfg.validate();
  const TrainResult r = train(model, data, cfg);
  std::ostringstream csv;
  csv << "epoch,loss,train_accuracy\n";
  for (const auto& m : r.metrics) csv << m.epoch << ',' << fmt(m.loss) << ',' << fmt(m.train_accuracy) << '\n';
  save_model(r.model, a.out);
  write_text_atomic(or_default(a.metrics, a.out + ".metrics.csv"), csv.str());
  record_run("train", a, a.out);
  const double final_acc = r.metrics.empty() ? 0.0 : r.metrics.back().train_accuracy;
  std::printf("wrote %s; final train accuracy %s\n", a.out.c_str(), fmt(final_acc).c_str());
  return 0;
}

int cmd_analyze(const AnalyzeArgs& a) {
  require_out(a.out, {a.model, a.data});
  Model model = load_any_model(a.model);
  Dataset data = load_data(a.data, Split::Test, a.synth);
  if (a.eval_samples) data = data.head(a.eval_samples);
  if (a.seeds == 0) throw Error("--seeds must be >= 1");
  std::vector<std::string> layers;
  for (const auto* l : model.weight_layers()) layers.push_back(l->name);

  SensitivityReport report;
  if (a.mode == "gaussian") {
    for (std::size_t s = 0; s < a.seeds; ++s)
      report.append(gaussian_layer_sweep(model, data, layers, a.std_dev, a.seed + s));
  } else if (a.mode == "u8-layers") {
    model = quantize_weights_u8(model);
    const double rel = a.rel >= 0 ? a.rel : 0.03;
    for (std::size_t s = 0; s < a.seeds; ++s)
      report.append(layer_magnitude_sweep(model, data, layers, rel, a.seed + s));
  } else if (a.mode == "bins") {
    const std::string layer = a.layer.empty() ? layers_by_param_count(model).front() : a.layer;
    const TensorRecord& t = model.weights_of(layer);
    std::vector<double> edges;
    if (t.dtype == DType::U8) {
      edges = initial_bins_u8(t.levels, a.bins).spec.edges;
    } else {
      const auto values = binning_values(t);
      const auto [mean, sd] = mean_std(values);
      edges = initial_bins_invcdf(mean, sd > 0 ? sd : 1.0, a.bins).edges;
    }
    const double rel = a.rel >= 0 ? a.rel : (t.dtype == DType::U8 ? 0.03 : 0.5);
    for (std::size_t s = 0; s < a.seeds; ++s)
      report.append(bin_magnitude_sweep(model, data, layer, edges, rel, a.seed + s));
  } else if (a.mode == "grad-vs-random") {
    const Dataset train_data = load_data(or_default(a.grad_data, a.data), Split::Train, a.synth);
    const GradientStats grads = collect_gradients(model, train_data);
    for (std::size_t s = 0; s < a.seeds; ++s)
      report.append(gradient_vs_random(model, data, grads, layers, a.std_dev, a.fraction, a.seed + s));
  } else {
    throw Error("unknown analyze mode: " + a.mode);
  }
  write_text_atomic(a.out, report.to_csv());
  record_run("analyze", a, a.out);
  std::printf("wrote %s (%zu rows)\n", a.out.c_str(), report.rows.size());
  return 0;
}

int cmd_compress(const CompressArgs& a) {
  require_out(a.out, {a.model, a.data});
  Model model = load_any_model(a.model);
  if (a.variant == "u8")
    model = quantize_weights_u8(model);
  else if (a.variant != "float")
    throw Error("unknown variant: " + a.variant);
  const Dataset data = load_data(a.data, Split::Test, a.synth);
  BqConfig cfg;
  cfg.max_bins = a.max_bins;
  cfg.initial_bins = a.initial_bins;
  cfg.per_bin_drop_limit = a.per_bin_drop;
  cfg.layer_drop_limit = a.layer_drop;
  cfg.eval_samples = a.eval_samples;
  cfg.layers_to_try = a.layers;
  cfg.share_bins = a.share_bins;
  if (a.rel >= 0) cfg.rel = a.rel;
  cfg.seed = a.seed;
  const BqModelResult r = compress_model(model, data, cfg);

  Json layers = Json::array();
  for (const auto& l : r.layers) {
    Json trace = Json::array();
    for (const auto& it : l.trace)
      trace.push_back({{"bins", it.bins}, {"max_delta", it.max_delta}, {"split_bin", it.split_bin}});
    layers.push_back({{"layer", l.layer},
                      {"dtype", to_string(l.dtype)},
                      {"bins", l.bin_spec.bins()},
                      {"accepted", l.accepted},
                      {"degenerate", l.degenerate},
                      {"shared", l.shared},
                      {"accuracy_before", l.accuracy_before},
                      {"accuracy_after", l.accuracy_after},
                      {"drop", l.drop()},
                      {"evaluations", l.evaluations},
                      {"trace", trace}});
  }
  const Json metrics = {{"kind", "bq"},
                        {"variant", a.variant},
                        {"eval_samples", std::min(a.eval_samples, data.size())},
                        {"baseline_accuracy", r.baseline_accuracy},
                        {"final_accuracy", r.final_accuracy},
                        {"layers", layers}};
  BqzOptions opt;
  opt.huffman = a.huffman;
  opt.metrics = metrics;
  const std::size_t bytes = write_bqz(a.out, r.compressed, codings_from(r), opt);
  write_text_atomic(or_default(a.report, a.out + ".report.json"), metrics.dump(2) + "\n");
  record_run("compress", a, a.out);
  for (const auto& l : r.layers)
    std::printf("%s %s: %zu bins, drop %s\n", l.accepted ? "accepted" : "rejected", l.layer.c_str(),
                l.bin_spec.bins(), fmt(l.drop()).c_str());
  std::printf("wrote %s (%zu bytes); accuracy %s -> %s\n", a.out.c_str(), bytes,
              fmt(r.baseline_accuracy).c_str(), fmt(r.final_accuracy).c_str());
  return 0;
}

int cmd_gwk(const GwkArgs& a) {
  const std::string test_src = or_default(a.test_data, a.train_data);
  require_out(a.out, {a.model, a.train_data, test_src});
  const Model model = load_any_model(a.model);
  const Dataset train_data = load_data(a.train_data, Split::Train, a.synth);
  const Dataset test_data = load_data(test_src, Split::Test, a.synth);
  if (a.bits == 0 || a.bits > 16) throw Error("--bits must be in [1,16]");
  PQConfig pq;
  pq.d_conv = a.cv;
  pq.d_pw = a.pw;
  pq.n_clusters = std::size_t{1} << a.bits;
  pq.epochs_between_cluster = a.cluster_every;
  pq.uniform_weights = a.uniform_weights;
  pq.exempt_first_last = a.exempt_first_last;
  QatConfig qat;
  qat.weight_bits = a.weight_bits;
  qat.act_bits = a.act_bits;
  qat.delta = a.delta;
  if (a.estimator == "ste")
    qat.estimator = GradientEstimator::STE;
  else if (a.estimator != "ewgs")
    throw Error("unknown estimator: " + a.estimator);
  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.learning_rate = a.lr;
  cfg.batch_size = a.batch;
  cfg.momentum = a.momentum;
  cfg.seed = a.seed;
  cfg.validate();

  const double float_acc = evaluate(model, test_data);
  const GwkResult r = gwk_train(model, train_data, test_data, pq, qat, cfg);
  for (const auto& e : r.trace)
    for (const auto& w : e.warnings) std::fprintf(stderr, "bqkit: warning: epoch %zu: %s\n", e.epoch, w.c_str());
  const BpwReport bpw = bits_per_weight(r.storage());
  Json per_layer = Json::array();
  for (const auto& l : bpw.layers)
    per_layer.push_back({{"layer", l.layer}, {"bpw", l.bpw}, {"label_bpw", l.label_bpw}});
  BqzOptions opt;
  opt.huffman = a.huffman;
  opt.metrics = {{"kind", "gwk"},
                 {"baseline_accuracy", float_acc},
                 {"final_accuracy", r.final_accuracy},
                 {"bpw", bpw.bpw},
                 {"label_bpw", bpw.label_bpw},
                 {"layers", per_layer}};
  const std::size_t bytes = write_bqz(a.out, r.compressed, codings_from(r), opt);
  write_text_atomic(or_default(a.trace, a.out + ".trace.csv"), r.trace_csv());
  record_run("gwk", a, a.out);
  std::printf("wrote %s (%zu bytes); accuracy %s -> %s; bpw %s (labels %s)\n", a.out.c_str(), bytes,
              fmt(float_acc).c_str(), fmt(r.final_accuracy).c_str(), fmt(bpw.bpw).c_str(),
              fmt(bpw.label_bpw).c_str());
  return 0;
}

int cmd_eval(const EvalArgs& a) {
  if (!a.out.empty()) require_out(a.out, {a.model, a.data});
  const Model model = load_any_model(a.model);
  const Dataset data = load_data(a.data, parse_split(a.split), a.synth);
  const double acc = evaluate(model, data);
  std::printf("accuracy %s\n", fmt(acc).c_str());
  if (!a.out.empty()) {
    const Json j = {{"model", a.model}, {"samples", data.size()}, {"accuracy", acc}};
    write_text_atomic(a.out, j.dump(2) + "\n");
    record_run("eval", a, a.out);
  }
  return 0;
}

int cmd_report(const ReportArgs& a) {
  require_out(a.out, a.inputs);
  if (a.inputs.empty()) throw Error("report needs at least one input");
  Json entries = Json::array();
  for (const auto& path : a.inputs) {
    const Bytes bytes = read_file(path);
    const BqzFile f = decode_bqz(bytes);
    const BpwReport bpw = f.layers.empty() ? BpwReport{} : bits_per_weight(f);
    const Json m = f.metrics();
    Json e = {{"input", fs::path(path).filename().string()},
              {"file_bytes", bytes.size()},
              {"float32_bytes", float32_bytes(f.model)},
              {"compression_ratio", static_cast<double>(float32_bytes(f.model)) / bytes.size()},
              {"coded_layers", f.layers.size()},
              {"bpw", bpw.bpw},
              {"label_bpw", bpw.label_bpw}};
    if (m.contains("baseline_accuracy") && m.contains("final_accuracy")) {
      e["baseline_accuracy"] = m["baseline_accuracy"];
      e["final_accuracy"] = m["final_accuracy"];
      e["accuracy_delta"] = m["final_accuracy"].get<double>() - m["baseline_accuracy"].get<double>();
    }
    entries.push_back(std::move(e));
  }
  const Json out = {{"version", 1}, {"entries", entries}};
  write_text_atomic(a.out, out.dump(2) + "\n");
  record_run("report", a, a.out);
  std::printf("wrote %s (%zu entries)\n", a.out.c_str(), entries.size());
  return 0;
}

int dispatch(const std::string& command, const Json& args) {
  if (command == "make-data") return cmd_make_data(args.get<MakeDataArgs>());
  if (command == "train") return cmd_train(args.get<TrainArgs>());
  if (command == "analyze") return cmd_analyze(args.get<AnalyzeArgs>());
  if (command == "compress") return cmd_compress(args.get<CompressArgs>());
  if (command == "gwk") return cmd_gwk(args.get<GwkArgs>());
  if (command == "eval") return cmd_eval(args.get<EvalArgs>());
  if (command == "report") return cmd_report(args.get<ReportArgs>());
  throw Error("unknown command in run config: " + command);
}

int cmd_run(const std::string& path) {
  const Bytes b = read_file(path);
  Json j;
  try {
    j = Json::parse(b.begin(), b.end());
  } catch (const Json::exception& e) {
    throw Error("malformed run config " + path + ": " + e.what());
  }
  if (j.value("tool", "") != "bqkit" || j.value("version", 0) != kRunConfigVersion)
    throw Error("not a bqkit run config: " + path);
  return dispatch(j.at("command").get<std::string>(), j.at("args"));
}

void add_synth(CLI::App* app, SynthParams& p) {
  app->add_option("--n-train", p.n_train, "Synthetic train samples");
  app->add_option("--n-test", p.n_test, "Synthetic test samples");
  app->add_option("--data-seed", p.data_seed, "Synthetic data seed");
  app->add_option("--noise", p.noise, "Texture noise level");
  app->add_option("--classes", p.classes, "Blob classes");
  app->add_option("--dims", p.dims, "Blob dimensions");
  app->add_option("--spread", p.spread, "Blob spread");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bqkit: sensitivity-guided binning and gradient-weighted PQ for small networks"};
  app.require_subcommand(1);
  int jobs = 0;
  app.add_option("--jobs", jobs, "Worker threads (default: BQKIT_JOBS or hardware threads)");

  MakeDataArgs md;
  auto* s_md = app.add_subcommand("make-data", "Write a synthetic dataset (.nnd)");
  s_md->add_option("--source", md.source, "blobs | textures")->check(CLI::IsMember({"blobs", "textures"}));
  s_md->add_option("--split", md.split, "train | test")->check(CLI::IsMember({"train", "test"}));
  s_md->add_option("--out", md.out)->required();
  add_synth(s_md, md.synth);

  TrainArgs tr;
  auto* s_tr = app.add_subcommand("train", "Train a reference network");
  s_tr->add_option("--arch", tr.arch, "mlp | cnn | two-conv");
  s_tr->add_option("--data", tr.data, "blobs | textures | path to a train .nnd");
  s_tr->add_option("--epochs", tr.epochs);
  s_tr->add_option("--lr", tr.lr);
  s_tr->add_option("--batch", tr.batch);
  s_tr->add_option("--momentum", tr.momentum);
  s_tr->add_option("--seed", tr.seed);
  s_tr->add_option("--hidden", tr.hidden, "mlp hidden width");
  s_tr->add_option("--out", tr.out)->required();
  s_tr->add_option("--metrics", tr.metrics, "Metrics CSV (default <out>.metrics.csv)");
  add_synth(s_tr, tr.synth);

  AnalyzeArgs an;
  auto* s_an = app.add_subcommand("analyze", "Sensitivity analysis");
  s_an->add_option("--model", an.model)->required();
  s_an->add_option("--data", an.data, "Evaluation data (test split)");
  s_an->add_option("--grad-data", an.grad_data, "Gradient data (train split)");
  s_an->add_option("--mode", an.mode, "gaussian | bins | u8-layers | grad-vs-random")
      ->check(CLI::IsMember({"gaussian", "bins", "u8-layers", "grad-vs-random"}));
  s_an->add_option("--std", an.std_dev, "Gaussian noise std");
  s_an->add_option("--rel", an.rel, "Relative magnitude perturbation (negative: dtype default)");
  s_an->add_option("--fraction", an.fraction);
  s_an->add_option("--seeds", an.seeds, "Number of consecutive seeds");
  s_an->add_option("--seed", an.seed, "First seed");
  s_an->add_option("--layer", an.layer, "Layer for bins mode");
  s_an->add_option("--bins", an.bins);
  s_an->add_option("--eval-samples", an.eval_samples, "0 = all");
  s_an->add_option("--out", an.out)->required();
  add_synth(s_an, an.synth);

  CompressArgs co;
  auto* s_co = app.add_subcommand("compress", "Bin & quant compression to .bqz");
  s_co->add_option("--model", co.model)->required();
  s_co->add_option("--data", co.data, "Evaluation data (test split)");
  s_co->add_option("--variant", co.variant, "float | u8")->check(CLI::IsMember({"float", "u8"}));
  s_co->add_option("--max-bins", co.max_bins);
  s_co->add_option("--initial-bins", co.initial_bins);
  s_co->add_option("--per-bin-drop", co.per_bin_drop);
  s_co->add_option("--layer-drop", co.layer_drop);
  s_co->add_option("--eval-samples", co.eval_samples);
  s_co->add_option("--layers", co.layers, "Number of largest layers to try");
  s_co->add_flag("--share-bins", co.share_bins);
  s_co->add_option("--rel", co.rel, "Per-bin perturbation (negative: dtype default)");
  s_co->add_option("--seed", co.seed);
  s_co->add_flag("--huffman", co.huffman);
  s_co->add_option("--out", co.out)->required();
  s_co->add_option("--report", co.report, "Per-layer report (default <out>.report.json)");
  add_synth(s_co, co.synth);

  GwkArgs gw;
  auto* s_gw = app.add_subcommand("gwk", "Gradient-weighted PQ training to .bqz");
  s_gw->add_option("--model", gw.model)->required();
  s_gw->add_option("--train-data", gw.train_data);
  s_gw->add_option("--test-data", gw.test_data);
  s_gw->add_option("--cv", gw.cv, "Block size for conv/dense layers");
  s_gw->add_option("--pw", gw.pw, "Block size for point-wise convs");
  s_gw->add_option("--bits", gw.bits, "log2 of the number of clusters");
  s_gw->add_option("--weight-bits", gw.weight_bits);
  s_gw->add_option("--act-bits", gw.act_bits);
  s_gw->add_option("--delta", gw.delta);
  s_gw->add_option("--estimator", gw.estimator, "ewgs | ste")->check(CLI::IsMember({"ewgs", "ste"}));
  s_gw->add_option("--epochs", gw.epochs);
  s_gw->add_option("--lr", gw.lr);
  s_gw->add_option("--batch", gw.batch);
  s_gw->add_option("--momentum", gw.momentum);
  s_gw->add_option("--seed", gw.seed);
  s_gw->add_option("--cluster-every", gw.cluster_every);
  s_gw->add_flag("--uniform-weights", gw.uniform_weights);
  s_gw->add_flag("--exempt-first-last", gw.exempt_first_last);
  s_gw->add_flag("--huffman", gw.huffman);
  s_gw->add_option("--out", gw.out)->required();
  s_gw->add_option("--trace", gw.trace, "Epoch trace CSV (default <out>.trace.csv)");
  add_synth(s_gw, gw.synth);

  EvalArgs ev;
  auto* s_ev = app.add_subcommand("eval", "Accuracy of a .nnmod or .bqz model");
  s_ev->add_option("--model", ev.model)->required();
  s_ev->add_option("--data", ev.data);
  s_ev->add_option("--split", ev.split)->check(CLI::IsMember({"train", "test"}));
  s_ev->add_option("--out", ev.out, "Optional JSON result");
  add_synth(s_ev, ev.synth);

  ReportArgs rp;
  auto* s_rp = app.add_subcommand("report", "Aggregate .bqz metrics to JSON");
  s_rp->add_option("inputs", rp.inputs)->required();
  s_rp->add_option("--out", rp.out)->required();

  std::string run_path;
  auto* s_run = app.add_subcommand("run", "Re-execute a recorded <out>.run.json");
  s_run->add_option("config", run_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (jobs < 0) throw Error("--jobs must be >= 0");
    default_jobs() = resolve_jobs(jobs);
    if (s_md->parsed()) return cmd_make_data(md);
    if (s_tr->parsed()) return cmd_train(tr);
    if (s_an->parsed()) return cmd_analyze(an);
    if (s_co->parsed()) return cmd_compress(co);
    if (s_gw->parsed()) return cmd_gwk(gw);
    if (s_ev->parsed()) return cmd_eval(ev);
    if (s_rp->parsed()) return cmd_report(rp);
    if (s_run->parsed()) return cmd_run(run_path);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bqkit: error: %s\n", e.what());
    return 1;
  }
  return 1;
}
