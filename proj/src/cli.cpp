#include "reqvec/cli.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "reqvec/bbpe.hpp"
#include "reqvec/classify.hpp"
#include "reqvec/corpus.hpp"
#include "reqvec/embedder.hpp"
#include "reqvec/encoder.hpp"
#include "reqvec/errors.hpp"
#include "reqvec/explain.hpp"
#include "reqvec/project.hpp"

namespace reqvec {

namespace {

using nlohmann::json;

struct Options {
  std::string config_path;
  uint64_t seed = 0;

  // import
  std::string input;
  std::string in_format = "rawdir";
  std::string profile = "identity";
  std::string split = "inference";
  std::string default_label = "unlabeled";
  std::string hosts;
  bool lenient = false;
  bool no_text_filter = false;

  // synth
  int normal = 1000;
  int anomaly = 0;
  std::string planted_token;
  bool planted_only = false;

  // tokenizer
  std::string train_path;
  std::string inference_path;
  int vocab_size = 5000;
  bool train_only = false;

  // shared artifact paths
  std::string corpus_path;
  std::string vocab_path;
  std::string weights_path;
  std::string embeddings_path;
  std::string model_path;
  std::string output;

  // train-lm
  int epochs = 10;
  int batch_size = 32;
  int layers = 6;
  int heads = 12;
  int hidden = 768;
  int seq_len = 512;
  int ffn = 0;
  double mask_rate = 0.15;
  double dropout = 0.1;
  double lm_lr = 1e-4;
  double warmup = 0.06;
  double weight_decay = 0.01;
  bool static_masking = false;
  std::string trace_path;

  // embed
  std::string pooling = "mean";
  bool strict_layers = false;

  // train-clf / eval
  std::string model_kind = "logreg";
  int folds = 5;
  int max_iter = 500;
  double l2 = 1e-4;
  double tol = 1e-7;
  double svm_c = 1.0;
  int svm_epochs = 50;
  int trees = 100;
  int max_depth = 0;
  int max_features = 0;
  int min_leaf = 1;
  bool no_bootstrap = false;
  std::string report_path;
  std::string roc_path;

  // explain / neighbors
  std::vector<std::string> doc_ids;
  int top_k = 24;
  std::string format = "ansi";
  std::string render_path;
  int num_neighbors = 10;
  bool include_self = false;

  // project
  double perplexity = 30.0;
  int iterations = 1000;
  double exaggeration = 12.0;
  int exaggeration_iters = 250;
  double tsne_lr = 200.0;
  int momentum_switch = 250;
  int pca = 50;
  std::string csv_path;
  std::string svg_path;
  std::string kl_path;
};

std::string artifact_dir() {
  const char* env = std::getenv("REQVEC_ARTIFACTS");
  return env && *env ? env : ".";
}

std::string resolve_out(const std::string& given, const std::string& default_name) {
  if (!given.empty()) return given;
  return (std::filesystem::path(artifact_dir()) / default_name).string();
}

void require(const std::string& value, const std::string& flag) {
  if (value.empty()) raise(Errc::usage, flag + " is required");
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(Errc::io_error, "cannot open " + path + " for writing");
  out << text;
  if (!out) raise(Errc::io_error, "failed while writing " + path);
}

void write_meta(const std::string& artifact_path, const json& meta) {
  write_text_file(artifact_path + ".meta.json", meta.dump() + "\n");
}

// ---------------------------------------------------------------------------
// App construction
// ---------------------------------------------------------------------------

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--config", o.config_path, "JSON config file; explicit flags win");
  sub->add_option("--seed", o.seed, "seed for every stochastic step");
}

std::unique_ptr<CLI::App> build_app(Options& o) {
  auto app = std::make_unique<CLI::App>("HTTP request corpus embedding and anomaly analysis");
  app->name("reqvec");
  app->require_subcommand(1);

  auto* import = app->add_subcommand("import", "normalize a raw or JSONL corpus into JSONL");
  import->add_option("--input", o.input, "raw request directory or JSONL file");
  import->add_option("--format", o.in_format, "input format: rawdir|jsonl")
      ->check(CLI::IsMember({"rawdir", "jsonl"}));
  import->add_option("--profile", o.profile, "normalization profile: csic|ids2018|ump|identity");
  import->add_option("--split", o.split, "corpus split: train|inference")
      ->check(CLI::IsMember({"train", "inference"}));
  import->add_option("--default-label", o.default_label,
                     "label for docs without one: normal|anomaly|unlabeled");
  import->add_option("--hosts", o.hosts, "comma-separated replacement host pool (ids2018)");
  import->add_flag("--lenient", o.lenient, "skip request-line validation");
  import->add_flag("--no-text-filter", o.no_text_filter,
                   "keep non-text bodies under the ids2018 profile");
  import->add_option("--output", o.output, "output JSONL path");
  add_common(import, o);

  auto* synth = app->add_subcommand("synth", "generate a synthetic labeled corpus");
  synth->add_option("--normal", o.normal, "number of normal docs");
  synth->add_option("--anomaly", o.anomaly, "number of anomalous docs");
  synth->add_option("--planted-token", o.planted_token,
                    "token planted in every anomaly and no normal doc");
  synth->add_flag("--planted-only", o.planted_only,
                  "make the planted token the only anomaly signal");
  synth->add_option("--split", o.split, "corpus split: train|inference")
      ->check(CLI::IsMember({"train", "inference"}));
  synth->add_option("--output", o.output, "output JSONL path");
  add_common(synth, o);

  auto* tok = app->add_subcommand("train-tokenizer", "train the byte-level BPE vocabulary");
  tok->add_option("--train", o.train_path, "training-split JSONL corpus");
  tok->add_option("--inference", o.inference_path, "inference-split JSONL corpus (optional)");
  tok->add_option("--vocab-size", o.vocab_size, "target vocabulary size");
  tok->add_flag("--train-only", o.train_only, "exclude the inference corpus from statistics");
  tok->add_option("--output", o.output, "output vocab path");
  add_common(tok, o);

  auto* lm = app->add_subcommand("train-lm", "train the masked-language-model encoder");
  lm->add_option("--corpus", o.corpus_path, "training JSONL corpus");
  lm->add_option("--vocab", o.vocab_path, "vocab file");
  lm->add_option("--epochs", o.epochs, "training epochs");
  lm->add_option("--batch-size", o.batch_size, "sequences per optimizer step");
  lm->add_option("--mask-rate", o.mask_rate, "per-token masking probability");
  lm->add_option("--layers", o.layers, "encoder layers");
  lm->add_option("--heads", o.heads, "attention heads");
  lm->add_option("--hidden", o.hidden, "hidden width");
  lm->add_option("--seq-len", o.seq_len, "maximum sequence length");
  lm->add_option("--ffn", o.ffn, "feed-forward width (0 = 4x hidden)");
  lm->add_option("--dropout", o.dropout, "dropout rate");
  lm->add_option("--lr", o.lm_lr, "peak learning rate");
  lm->add_option("--warmup", o.warmup, "warmup fraction of total steps");
  lm->add_option("--weight-decay", o.weight_decay, "decoupled weight decay on matrices");
  lm->add_flag("--static-masking", o.static_masking, "reuse the same mask every epoch");
  lm->add_option("--trace", o.trace_path, "write per-step loss CSV here");
  lm->add_option("--output", o.output, "output weights path");
  add_common(lm, o);

  auto* embed = app->add_subcommand("embed", "embed a corpus with a trained encoder");
  embed->add_option("--corpus", o.corpus_path, "JSONL corpus");
  embed->add_option("--vocab", o.vocab_path, "vocab file");
  embed->add_option("--weights", o.weights_path, "encoder weights");
  embed->add_option("--pooling", o.pooling, "token pooling: mean|first")
      ->check(CLI::IsMember({"mean", "first"}));
  embed->add_flag("--strict-layers", o.strict_layers, "require at least 4 encoder layers");
  embed->add_option("--output", o.output, "output embeddings path");
  add_common(embed, o);

  auto add_clf_options = [&](CLI::App* sub) {
    sub->add_option("--model", o.model_kind, "classifier: logreg|svm|forest")
        ->check(CLI::IsMember({"logreg", "svm", "forest"}));
    sub->add_option("--max-iter", o.max_iter, "logreg gradient-descent iterations");
    sub->add_option("--l2", o.l2, "logreg L2 strength");
    sub->add_option("--tol", o.tol, "logreg gradient-norm stop");
    sub->add_option("--C", o.svm_c, "SVM inverse regularization");
    sub->add_option("--epochs", o.svm_epochs, "SVM epochs");
    sub->add_option("--trees", o.trees, "forest size");
    sub->add_option("--max-depth", o.max_depth, "forest depth cap (0 = unbounded)");
    sub->add_option("--max-features", o.max_features, "features per split (0 = sqrt)");
    sub->add_option("--min-leaf", o.min_leaf, "minimum samples per leaf");
    sub->add_flag("--no-bootstrap", o.no_bootstrap, "train each tree on the full data");
  };

  auto* clf = app->add_subcommand("train-clf", "train a classifier on embeddings");
  clf->add_option("--embeddings", o.embeddings_path, "embedding file");
  add_clf_options(clf);
  clf->add_option("--output", o.output, "output model path");
  add_common(clf, o);

  auto* eval = app->add_subcommand("eval", "stratified cross-validated evaluation");
  eval->add_option("--embeddings", o.embeddings_path, "embedding file");
  add_clf_options(eval);
  eval->add_option("--folds", o.folds, "number of stratified folds");
  eval->add_option("--report", o.report_path, "output report JSON path");
  eval->add_option("--roc", o.roc_path, "output ROC CSV path");
  add_common(eval, o);

  auto* explain = app->add_subcommand("explain", "token-ablation attribution for documents");
  explain->add_option("--corpus", o.corpus_path, "JSONL corpus holding the documents");
  explain->add_option("--vocab", o.vocab_path, "vocab file");
  explain->add_option("--weights", o.weights_path, "encoder weights");
  explain->add_option("--model", o.model_path, "linear model file");
  explain->add_option("--doc-id", o.doc_ids, "document id (repeat to aggregate)");
  explain->add_option("--top-k", o.top_k, "entries kept in emitted rankings");
  explain->add_option("--pooling", o.pooling, "token pooling: mean|first")
      ->check(CLI::IsMember({"mean", "first"}));
  explain->add_option("--format", o.format, "highlight format: ansi|html")
      ->check(CLI::IsMember({"ansi", "html"}));
  explain->add_option("--render", o.render_path, "highlight output path (html)");
  explain->add_option("--output", o.output, "attribution/aggregate JSON path (default stdout)");
  add_common(explain, o);

  auto* neighbors = app->add_subcommand("neighbors", "nearest neighbors of a document");
  neighbors->add_option("--embeddings", o.embeddings_path, "embedding file");
  neighbors->add_option("--doc-id", o.doc_ids, "query document id");
  neighbors->add_option("--n", o.num_neighbors, "neighbor count");
  neighbors->add_flag("--include-self", o.include_self, "keep the query at rank 0");
  neighbors->add_option("--format", o.format, "output format: json|csv")
      ->check(CLI::IsMember({"json", "csv"}));
  neighbors->add_option("--output", o.output, "output path (default stdout)");
  add_common(neighbors, o);

  auto* project = app->add_subcommand("project", "t-SNE projection to 2D scatter data");
  project->add_option("--embeddings", o.embeddings_path, "embedding file");
  project->add_option("--perplexity", o.perplexity, "t-SNE perplexity");
  project->add_option("--iterations", o.iterations, "gradient-descent iterations");
  project->add_option("--exaggeration", o.exaggeration, "early-exaggeration factor");
  project->add_option("--exaggeration-iters", o.exaggeration_iters, "early-exaggeration span");
  project->add_option("--lr", o.tsne_lr, "t-SNE learning rate");
  project->add_option("--momentum-switch", o.momentum_switch, "iteration switching momentum");
  project->add_option("--pca", o.pca, "PCA pre-reduction dims (0 = off)");
  project->add_option("--csv", o.csv_path, "scatter CSV path");
  project->add_option("--svg", o.svg_path, "scatter SVG path");
  project->add_option("--kl", o.kl_path, "KL trace CSV path");
  add_common(project, o);

  return app;
}

// Config keys are long flag names without the dashes; values already given on
// the command line win.
std::vector<std::string> config_tokens(const CLI::App* sub, const std::string& path) {
  std::ifstream in(path);
  if (!in) raise(Errc::io_error, "cannot open config file " + path);
  json cfg;
  try {
    in >> cfg;
  } catch (const json::exception& e) {
    raise(Errc::format_error, std::string("bad config file: ") + e.what());
  }
  if (!cfg.is_object()) raise(Errc::format_error, "config file must hold a JSON object");

  std::vector<std::string> tokens;
  for (const auto& [key, value] : cfg.items()) {
    const std::string flag = "--" + key;
    const CLI::Option* opt = sub->get_option_no_throw(flag);
    if (!opt) raise(Errc::invalid_config, "config key '" + key + "' is not a flag of " +
                                              sub->get_name());
    if (opt->count() > 0) continue;  // the command line overrides the file
    if (value.is_boolean()) {
      if (value.get<bool>()) tokens.push_back(flag);
    } else if (value.is_array()) {
      for (const auto& item : value) {
        tokens.push_back(flag);
        tokens.push_back(item.is_string() ? item.get<std::string>() : item.dump());
      }
    } else {
      tokens.push_back(flag);
      tokens.push_back(value.is_string() ? value.get<std::string>() : value.dump());
    }
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Subcommand handlers
// ---------------------------------------------------------------------------

HostPool parse_hosts(const std::string& csv) {
  if (csv.empty())
    return HostPool{{"example.com", "service.internal", "web01.local", "api.example.org"}};
  HostPool pool;
  std::stringstream ss(csv);
  std::string host;
  while (std::getline(ss, host, ','))
    if (!host.empty()) pool.hosts.push_back(host);
  if (pool.hosts.empty()) raise(Errc::invalid_config, "--hosts lists no hosts");
  return pool;
}

void print_corpus_summary(const Corpus& corpus, const std::string& path) {
  size_t normal = 0, anomaly = 0, unlabeled = 0;
  for (const auto& d : corpus.docs) {
    if (d.label == Label::normal) ++normal;
    else if (d.label == Label::anomaly) ++anomaly;
    else ++unlabeled;
  }
  std::cout << corpus.docs.size() << " docs (" << normal << " normal, " << anomaly
            << " anomaly, " << unlabeled << " unlabeled) -> " << path << "\n";
}

int cmd_import(const Options& o) {
  require(o.input, "--input");
  const std::string out = resolve_out(o.output, "corpus.jsonl");
  const Split split = o.split == "train" ? Split::train : Split::inference;
  const CorpusFormat format = o.in_format == "jsonl" ? CorpusFormat::jsonl : CorpusFormat::rawdir;
  const ParseMode mode = o.lenient ? ParseMode::lenient : ParseMode::full_request;

  Corpus corpus = load_corpus(o.input, format, split, mode, label_from_name(o.default_label));

  NormalizationProfile prof;
  prof.name = profile_from_name(o.profile);
  prof.seed = o.seed;
  prof.host_pool = parse_hosts(o.hosts);
  prof.require_text_content_type =
      prof.name == NormalizationProfile::Name::ids2018 && !o.no_text_filter;
  corpus = apply_profile(corpus, prof);
  validate_corpus(corpus);
  save_corpus(corpus, out);
  write_meta(out, {{"command", "import"},
                   {"input", o.input},
                   {"format", o.in_format},
                   {"profile", o.profile},
                   {"split", o.split},
                   {"default_label", o.default_label},
                   {"lenient", o.lenient},
                   {"text_filter", prof.require_text_content_type},
                   {"seed", o.seed}});
  print_corpus_summary(corpus, out);
  return 0;
}

int cmd_synth(const Options& o) {
  const std::string out = resolve_out(o.output, "corpus.jsonl");
  SynthSpec spec;
  spec.normal = o.normal;
  spec.anomaly = o.anomaly;
  spec.seed = o.seed;
  if (!o.planted_token.empty()) spec.planted_token = o.planted_token;
  spec.planted_only = o.planted_only;
  spec.split = o.split == "train" ? Split::train : Split::inference;

  const Corpus corpus = generate_synthetic_corpus(spec);
  save_corpus(corpus, out);
  write_meta(out, {{"command", "synth"},
                   {"normal", o.normal},
                   {"anomaly", o.anomaly},
                   {"planted_token", o.planted_token},
                   {"planted_only", o.planted_only},
                   {"split", o.split},
                   {"seed", o.seed}});
  print_corpus_summary(corpus, out);
  return 0;
}

int cmd_train_tokenizer(const Options& o) {
  require(o.train_path, "--train");
  const std::string out = resolve_out(o.output, "vocab.txt");
  const Corpus train = load_corpus(o.train_path, CorpusFormat::jsonl, Split::train);
  Corpus inference;
  const bool with_inference = !o.inference_path.empty() && !o.train_only;
  if (with_inference) inference = load_corpus(o.inference_path, CorpusFormat::jsonl);

  BbpeTrainConfig config;
  config.vocab_size = o.vocab_size;
  const BbpeVocab vocab = train_bbpe(train, with_inference ? &inference : nullptr, config);
  save_vocab(vocab, out);
  write_meta(out, {{"command", "train-tokenizer"},
                   {"train", o.train_path},
                   {"inference", o.inference_path},
                   {"vocab_size", o.vocab_size},
                   {"train_only", o.train_only},
                   {"seed", o.seed}});
  std::cout << "vocab of " << vocab.size() << " tokens (" << vocab.merges().size()
            << " merges) -> " << out << "\n";
  return 0;
}

std::vector<std::vector<int>> tokenize_corpus_lines(const Corpus& corpus, const BbpeVocab& vocab,
                                                    int max_seq_len) {
  std::vector<std::vector<int>> sequences;
  for (const auto& doc : corpus.docs)
    for (const auto& line : doc.lines)
      if (!line.empty()) sequences.push_back(tokenize_line(vocab, line, max_seq_len));
  return sequences;
}

int cmd_train_lm(const Options& o) {
  require(o.corpus_path, "--corpus");
  require(o.vocab_path, "--vocab");
  const std::string out = resolve_out(o.output, "weights.bin");
  const Corpus corpus = load_corpus(o.corpus_path, CorpusFormat::jsonl);
  const BbpeVocab vocab = load_vocab(o.vocab_path);

  EncoderConfig config;
  config.num_layers = o.layers;
  config.num_heads = o.heads;
  config.hidden = o.hidden;
  config.ffn = o.ffn;
  config.max_seq_len = o.seq_len;
  config.vocab_size = vocab.size();
  config.dropout = o.dropout;
  config.mask_rate = o.mask_rate;
  config.seed = o.seed;
  config.validate();

  TrainConfig train_config;
  train_config.epochs = o.epochs;
  train_config.batch_size = o.batch_size;
  train_config.lr = o.lm_lr;
  train_config.warmup_frac = o.warmup;
  train_config.weight_decay = o.weight_decay;
  train_config.dynamic_masking = !o.static_masking;
  train_config.seed = o.seed;

  const auto sequences = tokenize_corpus_lines(corpus, vocab, config.max_seq_len);
  auto params = init_encoder<float>(config);
  const LossTrace trace = train_mlm(params, sequences, train_config);
  save_params(params, out);
  write_meta(out, {{"command", "train-lm"},
                   {"corpus", o.corpus_path},
                   {"vocab", o.vocab_path},
                   {"epochs", o.epochs},
                   {"batch_size", o.batch_size},
                   {"lr", o.lm_lr},
                   {"warmup", o.warmup},
                   {"weight_decay", o.weight_decay},
                   {"dynamic_masking", !o.static_masking},
                   {"seed", o.seed}});

  for (size_t e = 0; e < trace.epoch_perplexity.size(); ++e)
    std::cout << "epoch " << e + 1 << ": masked perplexity " << trace.epoch_perplexity[e]
              << "\n";
  std::cout << "weights -> " << out << "\n";
  if (!o.trace_path.empty()) {
    std::ostringstream csv;
    csv << "step,loss\n";
    csv.precision(17);
    for (size_t s = 0; s < trace.step_loss.size(); ++s) csv << s << ',' << trace.step_loss[s] << '\n';
    write_text_file(o.trace_path, csv.str());
  }
  return 0;
}

int cmd_embed(const Options& o) {
  require(o.corpus_path, "--corpus");
  require(o.vocab_path, "--vocab");
  require(o.weights_path, "--weights");
  const std::string out = resolve_out(o.output, "embeddings.bin");
  const Corpus corpus = load_corpus(o.corpus_path, CorpusFormat::jsonl);
  const BbpeVocab vocab = load_vocab(o.vocab_path);
  const auto params = load_params(o.weights_path);
  if (vocab.size() != params.config.vocab_size)
    raise(Errc::shape_mismatch, "vocab has " + std::to_string(vocab.size()) +
                                    " tokens but the model expects " +
                                    std::to_string(params.config.vocab_size));

  const EmbeddingMatrix matrix =
      embed_corpus(params, vocab, corpus, pooling_from_name(o.pooling), o.strict_layers);
  save_embeddings(matrix, out);
  write_meta(out, {{"command", "embed"},
                   {"corpus", o.corpus_path},
                   {"vocab", o.vocab_path},
                   {"weights", o.weights_path},
                   {"pooling", o.pooling},
                   {"strict_layers", o.strict_layers},
                   {"seed", o.seed}});
  std::cout << matrix.count() << " embeddings of dim " << matrix.dim() << " (model "
            << fingerprint_hex(matrix.fingerprint) << ") -> " << out << "\n";
  return 0;
}

struct TrainerBundle {
  TrainScoreFn train_and_score;
  std::function<AnyModel(const Eigen::MatrixXd&, const std::vector<int>&)> train;
};

TrainerBundle make_trainer(const Options& o) {
  TrainerBundle bundle;
  if (o.model_kind == "logreg") {
    LogRegConfig cfg{o.max_iter, 0.0, o.l2, o.tol};
    bundle.train = [cfg](const Eigen::MatrixXd& x, const std::vector<int>& y) {
      return AnyModel{train_logreg(x, y, cfg)};
    };
    bundle.train_and_score = [cfg](const Eigen::MatrixXd& xtr, const std::vector<int>& ytr,
                                   const Eigen::MatrixXd& xte) {
      return decision_scores(train_logreg(xtr, ytr, cfg), xte);
    };
  } else if (o.model_kind == "svm") {
    SvmConfig cfg{o.svm_c, o.svm_epochs, o.seed};
    bundle.train = [cfg](const Eigen::MatrixXd& x, const std::vector<int>& y) {
      return AnyModel{train_linear_svm(x, y, cfg)};
    };
    bundle.train_and_score = [cfg](const Eigen::MatrixXd& xtr, const std::vector<int>& ytr,
                                   const Eigen::MatrixXd& xte) {
      return decision_scores(train_linear_svm(xtr, ytr, cfg), xte);
    };
  } else if (o.model_kind == "forest") {
    ForestConfig cfg{o.trees, o.max_features, o.max_depth, o.min_leaf, !o.no_bootstrap, o.seed};
    bundle.train = [cfg](const Eigen::MatrixXd& x, const std::vector<int>& y) {
      return AnyModel{train_random_forest(x, y, cfg)};
    };
    bundle.train_and_score = [cfg](const Eigen::MatrixXd& xtr, const std::vector<int>& ytr,
                                   const Eigen::MatrixXd& xte) {
      return decision_scores(train_random_forest(xtr, ytr, cfg), xte);
    };
  } else {
    raise(Errc::usage, "unknown --model '" + o.model_kind + "'");
  }
  return bundle;
}

json clf_config_json(const Options& o) {
  return {{"model", o.model_kind}, {"max_iter", o.max_iter},   {"l2", o.l2},
          {"tol", o.tol},          {"C", o.svm_c},             {"epochs", o.svm_epochs},
          {"trees", o.trees},      {"max_depth", o.max_depth}, {"max_features", o.max_features},
          {"min_leaf", o.min_leaf},{"bootstrap", !o.no_bootstrap}, {"seed", o.seed}};
}

int cmd_train_clf(const Options& o) {
  require(o.embeddings_path, "--embeddings");
  const std::string out = resolve_out(o.output, "model.json");
  const EmbeddingMatrix matrix = load_embeddings(o.embeddings_path);
  const std::vector<int> y = binary_labels(matrix.labels);
  const Eigen::MatrixXd x = matrix.values.cast<double>();

  AnyModel model = make_trainer(o).train(x, y);
  if (auto* linear = std::get_if<LinearModel>(&model)) {
    linear->embeddings_fingerprint = matrix.fingerprint;
    std::cout << o.model_kind << ": " << linear->iterations << " iterations, "
              << (linear->converged ? "converged" : "stopped at the limit") << "\n";
  } else {
    auto& forest = std::get<ForestModel>(model);
    forest.embeddings_fingerprint = matrix.fingerprint;
    std::cout << "forest: " << forest.trees.size() << " trees, oob accuracy "
              << forest.oob_accuracy << "\n";
  }
  save_model(model, out);
  write_meta(out, {{"command", "train-clf"}, {"config", clf_config_json(o)}});
  std::cout << "model -> " << out << "\n";
  return 0;
}

int cmd_eval(const Options& o) {
  require(o.embeddings_path, "--embeddings");
  const std::string report_path = resolve_out(o.report_path, "report.json");
  const std::string roc_path = resolve_out(o.roc_path, "roc.csv");
  const EmbeddingMatrix matrix = load_embeddings(o.embeddings_path);
  const std::vector<int> y = binary_labels(matrix.labels);
  const Eigen::MatrixXd x = matrix.values.cast<double>();

  const std::vector<int> fold_of = stratified_fold_indices(matrix.labels, o.folds, o.seed);
  const EvalReport report =
      evaluate_cv(x, y, make_trainer(o).train_and_score, fold_of, o.folds);

  json report_json = json::parse(report_to_json(report, o.model_kind));
  report_json["config"] = clf_config_json(o);
  report_json["config"]["folds"] = o.folds;
  write_text_file(report_path, report_json.dump() + "\n");
  write_text_file(roc_path, roc_to_csv(report));
  std::cout << report_to_text(report, o.model_kind);
  std::cout << "report -> " << report_path << ", roc -> " << roc_path << "\n";
  return 0;
}

const HttpRequestDoc& find_doc(const Corpus& corpus, const std::string& id) {
  for (const auto& doc : corpus.docs)
    if (doc.id == id) return doc;
  raise(Errc::unknown_id, "no doc with id " + id);
}

int cmd_explain(const Options& o) {
  require(o.corpus_path, "--corpus");
  require(o.vocab_path, "--vocab");
  require(o.weights_path, "--weights");
  require(o.model_path, "--model");
  if (o.doc_ids.empty()) raise(Errc::usage, "--doc-id is required");

  const Corpus corpus = load_corpus(o.corpus_path, CorpusFormat::jsonl);
  const BbpeVocab vocab = load_vocab(o.vocab_path);
  const auto params = load_params(o.weights_path);
  const AnyModel any = load_model(o.model_path);
  const LinearModel& model = require_linear(any);
  const uint64_t fp = model_fingerprint(vocab, params);
  if (model.embeddings_fingerprint != 0 && model.embeddings_fingerprint != fp)
    raise(Errc::fingerprint_mismatch,
          "model was trained on embeddings from " + fingerprint_hex(model.embeddings_fingerprint) +
              " but the loaded artifacts hash to " + fingerprint_hex(fp));

  const Pooling pooling = pooling_from_name(o.pooling);
  std::vector<AttributionReport> reports;
  for (const auto& id : o.doc_ids)
    reports.push_back(token_ablation_scores(find_doc(corpus, id), vocab, params, model, pooling));

  if (reports.size() == 1) {
    AttributionReport truncated = reports[0];
    if (static_cast<int>(truncated.entries.size()) > o.top_k)
      truncated.entries.resize(static_cast<size_t>(o.top_k));
    const std::string payload = attribution_to_json(truncated);
    if (o.output.empty())
      std::cout << payload;
    else
      write_text_file(o.output, payload);

    const auto& doc = find_doc(corpus, o.doc_ids[0]);
    if (o.format == "html") {
      const std::string path = resolve_out(o.render_path, "highlight.html");
      write_text_file(path, render_highlight(doc, vocab, reports[0], HighlightFormat::html));
      std::cout << "highlight -> " << path << "\n";
    } else {
      std::cout << render_highlight(doc, vocab, reports[0], HighlightFormat::ansi) << "\n";
    }
    return 0;
  }

  const auto ranked = aggregate_scores(reports, o.top_k);
  json j;
  j["format"] = "reqvec-aggregate";
  j["version"] = 1;
  j["weighting"] = "equal";
  j["docs"] = o.doc_ids;
  json tokens = json::array();
  for (const auto& t : ranked) tokens.push_back({{"token", t.token}, {"score", t.score}});
  j["tokens"] = std::move(tokens);
  const std::string payload =
      j.dump(-1, ' ', false, nlohmann::json::error_handler_t::replace) + "\n";
  if (o.output.empty())
    std::cout << payload;
  else
    write_text_file(o.output, payload);
  return 0;
}

int cmd_neighbors(const Options& o) {
  require(o.embeddings_path, "--embeddings");
  if (o.doc_ids.size() != 1) raise(Errc::usage, "exactly one --doc-id is required");
  const EmbeddingMatrix matrix = load_embeddings(o.embeddings_path);
  const NeighborList list =
      nearest_neighbors(matrix, o.doc_ids[0], o.num_neighbors, o.include_self);
  const std::string payload =
      o.format == "csv" ? neighbors_to_csv(list) : neighbors_to_json(list);
  if (o.output.empty())
    std::cout << payload;
  else
    write_text_file(o.output, payload);
  return 0;
}

int cmd_project(const Options& o) {
  require(o.embeddings_path, "--embeddings");
  const std::string csv_path = resolve_out(o.csv_path, "projection.csv");
  const std::string svg_path = resolve_out(o.svg_path, "projection.svg");
  const std::string kl_path = resolve_out(o.kl_path, "projection_kl.csv");
  const EmbeddingMatrix matrix = load_embeddings(o.embeddings_path);

  ProjectionConfig config;
  config.perplexity = o.perplexity;
  config.iterations = o.iterations;
  config.early_exaggeration = o.exaggeration;
  config.exaggeration_iters = o.exaggeration_iters;
  config.learning_rate = o.tsne_lr;
  config.momentum_switch_iter = o.momentum_switch;
  config.pca_predim = o.pca;
  config.seed = o.seed;

  const ProjectionResult result = tsne(matrix, config);
  emit_scatter(result.points, csv_path, ScatterFormat::csv);
  emit_scatter(result.points, svg_path, ScatterFormat::svg);
  write_text_file(kl_path, kl_trace_to_csv(result.kl_trace));
  const json meta = {{"command", "project"},
                     {"perplexity", o.perplexity},
                     {"iterations", o.iterations},
                     {"exaggeration", o.exaggeration},
                     {"exaggeration_iters", o.exaggeration_iters},
                     {"learning_rate", o.tsne_lr},
                     {"momentum_switch", o.momentum_switch},
                     {"pca", o.pca},
                     {"seed", o.seed}};
  write_meta(csv_path, meta);
  write_meta(svg_path, meta);
  std::cout << result.points.size() << " points -> " << csv_path << ", " << svg_path
            << " (final KL " << (result.kl_trace.empty() ? 0.0 : result.kl_trace.back())
            << ")\n";
  return 0;
}

int code_for(Errc c) {
  switch (c) {
    case Errc::usage:
      return 2;
    case Errc::io_error:
      return 3;
    case Errc::schema_error:
    case Errc::format_error:
    case Errc::unknown_profile:
      return 4;
    case Errc::shape_mismatch:
    case Errc::dimension_mismatch:
    case Errc::sequence_too_long:
    case Errc::too_few_layers:
      return 5;
    default:
      return 6;
  }
}

int dispatch(const std::string& name, const Options& o) {
  if (name == "import") return cmd_import(o);
  if (name == "synth") return cmd_synth(o);
  if (name == "train-tokenizer") return cmd_train_tokenizer(o);
  if (name == "train-lm") return cmd_train_lm(o);
  if (name == "embed") return cmd_embed(o);
  if (name == "train-clf") return cmd_train_clf(o);
  if (name == "eval") return cmd_eval(o);
  if (name == "explain") return cmd_explain(o);
  if (name == "neighbors") return cmd_neighbors(o);
  if (name == "project") return cmd_project(o);
  raise(Errc::usage, "unknown subcommand " + name);
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
  try {
    Options options;
    auto app = build_app(options);
    try {
      app->parse(std::vector<std::string>(args.rbegin(), args.rend()));
    } catch (const CLI::CallForHelp& e) {
      return app->exit(e);
    } catch (const CLI::ParseError& e) {
      app->exit(e);
      return 2;
    }

    CLI::App* sub = app->get_subcommands().front();
    if (!options.config_path.empty()) {
      const auto extra = config_tokens(sub, options.config_path);
      if (!extra.empty()) {
        const std::string sub_name = sub->get_name();
        options = Options();
        app = build_app(options);
        std::vector<std::string> merged = args;
        merged.insert(merged.end(), extra.begin(), extra.end());
        try {
          app->parse(std::vector<std::string>(merged.rbegin(), merged.rend()));
        } catch (const CLI::ParseError& e) {
          app->exit(e);
          return 2;
        }
        sub = app->get_subcommands().front();
        if (sub->get_name() != sub_name)
          raise(Errc::invalid_config, "config file changed the subcommand");
      }
    }
    return dispatch(sub->get_name(), options);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "unexpected error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace reqvec
