// End-to-end exercises of the subcommand CLI: exit codes, config merging,
// artifact metadata, and the full synth -> tokenize -> train -> embed ->
// classify -> analyze pipeline.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "reqvec/classify.hpp"
#include "reqvec/cli.hpp"
#include "reqvec/corpus.hpp"
#include "reqvec/embedder.hpp"
#include "test_util.hpp"

using namespace reqvec;
using testutil::contains;
using testutil::slurp;
using testutil::TempDir;

namespace {

struct CliResult {
  int code = -1;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  auto* old_out = std::cout.rdbuf(out.rdbuf());
  auto* old_err = std::cerr.rdbuf(err.rdbuf());
  CliResult result;
  try {
    result.code = run_cli(args);
  } catch (...) {
    std::cout.rdbuf(old_out);
    std::cerr.rdbuf(old_err);
    throw;
  }
  std::cout.rdbuf(old_out);
  std::cerr.rdbuf(old_err);
  result.out = out.str();
  result.err = err.str();
  return result;
}

nlohmann::json parse_file(const std::string& path) {
  return nlohmann::json::parse(slurp(path));
}

}  // namespace

TEST_CASE("usage problems exit with 2") {
  CHECK(run({}).code == 2);
  CHECK(run({"frobnicate"}).code == 2);
  // Flag validation happens before any handler runs.
  CHECK(run({"import", "--input", "x", "--format", "nope"}).code == 2);

  const CliResult missing = run({"train-tokenizer"});
  CHECK(missing.code == 2);
  CHECK(contains(missing.err, "--train"));
}

TEST_CASE("help lists the subcommands and exits cleanly") {
  const CliResult help = run({"--help"});
  CHECK(help.code == 0);
  CHECK(contains(help.out, "train-tokenizer"));
  CHECK(contains(help.out, "neighbors"));
}

TEST_CASE("missing input file maps to the io exit code") {
  TempDir dir;
  const CliResult r = run({"train-tokenizer", "--train", dir.sub("absent.jsonl")});
  CHECK(r.code == 3);
  CHECK(contains(r.err, "absent.jsonl"));
}

TEST_CASE("wrong artifact format maps to the format exit code") {
  TempDir dir;
  const std::string bogus = dir.file("emb.bin", "not an embeddings file");
  CHECK(run({"train-clf", "--embeddings", bogus}).code == 4);
}

TEST_CASE("end-to-end pipeline") {
  TempDir dir;
  const std::string train = dir.sub("train.jsonl");
  const std::string infer = dir.sub("infer.jsonl");
  const std::string vocab = dir.sub("vocab.txt");
  const std::string weights = dir.sub("weights.bin");
  const std::string emb = dir.sub("emb.bin");
  const std::string model = dir.sub("model.json");

  CHECK(run({"synth", "--normal", "80", "--split", "train", "--seed", "1", "--output", train})
            .code == 0);
  CHECK(run({"synth", "--normal", "20", "--anomaly", "20", "--seed", "2", "--output", infer})
            .code == 0);
  const nlohmann::json synth_meta = parse_file(train + ".meta.json");
  CHECK(synth_meta["command"] == "synth");
  CHECK(synth_meta["seed"] == 1);

  CHECK(run({"train-tokenizer", "--train", train, "--inference", infer, "--vocab-size", "320",
             "--output", vocab})
            .code == 0);
  CHECK(parse_file(vocab + ".meta.json")["vocab_size"] == 320);

  const CliResult lm = run({"train-lm", "--corpus", train, "--vocab", vocab, "--epochs", "1",
                            "--batch-size", "16", "--layers", "1", "--heads", "2", "--hidden",
                            "8", "--seq-len", "48", "--dropout", "0", "--lr", "1e-3", "--seed",
                            "3", "--trace", dir.sub("trace.csv"), "--output", weights});
  CHECK(lm.code == 0);
  CHECK(contains(lm.out, "masked perplexity"));
  CHECK(contains(slurp(dir.sub("trace.csv")), "step,loss\n0,"));

  CHECK(run({"embed", "--corpus", infer, "--vocab", vocab, "--weights", weights, "--output",
             emb})
            .code == 0);
  const EmbeddingMatrix matrix = load_embeddings(emb);
  CHECK(matrix.count() == 40);
  CHECK(matrix.dim() == 8);  // min(4, 1 layer) * hidden 8
  CHECK(parse_file(emb + ".meta.json")["pooling"] == "mean");

  // A vocab of a different size must not silently embed.
  const std::string vocab2 = dir.sub("vocab2.txt");
  CHECK(run({"train-tokenizer", "--train", train, "--vocab-size", "300", "--output", vocab2})
            .code == 0);
  CHECK(run({"embed", "--corpus", infer, "--vocab", vocab2, "--weights", weights, "--output",
             dir.sub("emb2.bin")})
            .code == 5);

  const CliResult clf = run({"train-clf", "--embeddings", emb, "--model", "logreg", "--output",
                             model});
  CHECK(clf.code == 0);
  const AnyModel loaded = load_model(model);
  REQUIRE(std::holds_alternative<LinearModel>(loaded));
  CHECK(std::get<LinearModel>(loaded).embeddings_fingerprint == matrix.fingerprint);
  CHECK(parse_file(model + ".meta.json")["config"]["model"] == "logreg");

  const CliResult eval = run({"eval", "--embeddings", emb, "--model", "logreg", "--folds", "4",
                              "--seed", "3", "--report", dir.sub("report.json"), "--roc",
                              dir.sub("roc.csv")});
  CHECK(eval.code == 0);
  CHECK(contains(eval.out, "FPR90"));
  const nlohmann::json report = parse_file(dir.sub("report.json"));
  CHECK(report["config"]["folds"] == 4);
  CHECK(report["config"]["seed"] == 3);
  CHECK(contains(slurp(dir.sub("roc.csv")), "fpr,tpr,threshold"));

  const CliResult nn = run({"neighbors", "--embeddings", emb, "--doc-id", "syn-a-00000", "--n",
                            "3", "--format", "csv", "--output", dir.sub("nn.csv")});
  CHECK(nn.code == 0);
  CHECK(contains(slurp(dir.sub("nn.csv")), "rank,doc_id,distance"));
  CHECK(run({"neighbors", "--embeddings", emb, "--doc-id", "no-such-doc"}).code == 6);

  const CliResult explain = run({"explain", "--corpus", infer, "--vocab", vocab, "--weights",
                                 weights, "--model", model, "--doc-id", "syn-a-00000", "--top-k",
                                 "5", "--format", "html", "--render", dir.sub("hl.html"),
                                 "--output", dir.sub("attr.json")});
  CHECK(explain.code == 0);
  const nlohmann::json attr = parse_file(dir.sub("attr.json"));
  CHECK(attr["doc_id"] == "syn-a-00000");
  CHECK(attr["entries"].size() <= 5);
  CHECK(contains(slurp(dir.sub("hl.html")), "<span"));

  const CliResult project = run({"project", "--embeddings", emb, "--perplexity", "5",
                                 "--iterations", "60", "--exaggeration-iters", "20",
                                 "--momentum-switch", "20", "--seed", "4", "--csv",
                                 dir.sub("p.csv"), "--svg", dir.sub("p.svg"), "--kl",
                                 dir.sub("kl.csv")});
  CHECK(project.code == 0);
  CHECK(contains(slurp(dir.sub("p.csv")), "id,x,y,label"));
  CHECK(contains(slurp(dir.sub("p.svg")), "</svg>"));
  CHECK(contains(slurp(dir.sub("kl.csv")), "iteration,kl"));
  CHECK(parse_file(dir.sub("p.csv") + ".meta.json")["seed"] == 4);
}

TEST_CASE("config file fills in unset flags and the command line wins") {
  TempDir dir;
  const std::string out = dir.sub("c.jsonl");
  const std::string cfg = dir.file("cfg.json", R"({"normal": 7, "anomaly": 3})");

  CHECK(run({"synth", "--config", cfg, "--normal", "5", "--output", out, "--seed", "1"}).code ==
        0);
  const Corpus corpus = load_corpus(out, CorpusFormat::jsonl);
  size_t normal = 0, anomaly = 0;
  for (const auto& d : corpus.docs) (d.label == Label::normal ? normal : anomaly)++;
  CHECK(normal == 5);   // flag beat the config value 7
  CHECK(anomaly == 3);  // config filled the unset flag

  const std::string bad = dir.file("bad.json", R"({"bogus": 1})");
  CHECK(run({"synth", "--config", bad, "--output", out}).code == 6);
  const std::string broken = dir.file("broken.json", "{nope");
  CHECK(run({"synth", "--config", broken, "--output", out}).code == 4);
}

TEST_CASE("boolean and string config values") {
  TempDir dir;
  const std::string out = dir.sub("p.jsonl");
  const std::string cfg = dir.file(
      "cfg.json", R"({"planted-token": "ZQXJKV", "planted-only": true, "anomaly": 4, "normal": 4})");

  CHECK(run({"synth", "--config", cfg, "--output", out, "--seed", "9"}).code == 0);
  const Corpus corpus = load_corpus(out, CorpusFormat::jsonl);
  for (const auto& doc : corpus.docs) {
    bool planted = false;
    for (const auto& line : doc.lines) planted = planted || contains(line, "ZQXJKV");
    CHECK(planted == (doc.label == Label::anomaly));
  }
}

TEST_CASE("artifact directory env var supplies default outputs") {
  TempDir dir;
  ::setenv("REQVEC_ARTIFACTS", dir.path.string().c_str(), 1);
  const CliResult r = run({"synth", "--normal", "6", "--seed", "1"});
  ::unsetenv("REQVEC_ARTIFACTS");
  CHECK(r.code == 0);
  CHECK(std::filesystem::exists(dir.path / "corpus.jsonl"));
  CHECK(std::filesystem::exists(dir.path / "corpus.jsonl.meta.json"));
}

TEST_CASE("identical invocations produce identical artifacts") {
  TempDir dir;
  const std::vector<std::string> base = {"synth", "--normal", "12", "--anomaly", "6", "--seed",
                                         "21", "--output"};
  std::vector<std::string> first = base;
  first.push_back(dir.sub("a.jsonl"));
  std::vector<std::string> second = base;
  second.push_back(dir.sub("b.jsonl"));

  CHECK(run(first).code == 0);
  CHECK(run(second).code == 0);
  CHECK(slurp(dir.sub("a.jsonl")) == slurp(dir.sub("b.jsonl")));
}
