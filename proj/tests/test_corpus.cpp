#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <map>
#include <set>

#include "reqvec/corpus.hpp"
#include "reqvec/errors.hpp"
#include "test_util.hpp"

using namespace reqvec;
using testutil::code_of;
using testutil::contains;
using testutil::slurp;
using testutil::TempDir;

TEST_CASE("parse splits CRLF requests into lines") {
  auto doc = parse_http_request("GET / HTTP/1.1\r\nHost: a\r\n\r\n", ParseMode::full_request);
  REQUIRE(doc.lines == std::vector<std::string>{"GET / HTTP/1.1", "Host: a"});
}

TEST_CASE("parse preserves hostile URIs byte for byte") {
  const std::string uri = "/tienda1/publico/vaciar.jsp?B2=Vaciar+carrito%27%3B+DROP+TABLE+usuarios%3B";
  auto doc = parse_http_request("GET " + uri + " HTTP/1.1\r\nHost: x\r\n", ParseMode::full_request);
  CHECK(doc.lines[0] == "GET " + uri + " HTTP/1.1");
}

TEST_CASE("parse falls back to bare LF separators") {
  auto doc = parse_http_request("GET / HTTP/1.1\nHost: a\n", ParseMode::full_request);
  CHECK(doc.lines == std::vector<std::string>{"GET / HTTP/1.1", "Host: a"});
}

TEST_CASE("parse keeps the body as trailing lines") {
  auto doc = parse_http_request("POST /x HTTP/1.1\r\nHost: a\r\n\r\nuser=bob\r\n",
                                ParseMode::full_request);
  CHECK(doc.lines == std::vector<std::string>{"POST /x HTTP/1.1", "Host: a", "", "user=bob"});
}

TEST_CASE("parse rejects malformed request lines in full-request mode") {
  CHECK(code_of([] { parse_http_request("???\r\n", ParseMode::full_request); }) ==
        Errc::malformed_request_line);
  CHECK_NOTHROW(parse_http_request("???\r\n", ParseMode::lenient));
}

TEST_CASE("parse rejects empty input") {
  CHECK(code_of([] { parse_http_request("", ParseMode::full_request); }) == Errc::empty_input);
  CHECK(code_of([] { parse_http_request("\r\n\r\n", ParseMode::full_request); }) ==
        Errc::empty_input);
}

TEST_CASE("csic profile literalizes embedded CR and LF bytes") {
  HttpRequestDoc doc;
  doc.lines = {"GET / HTTP/1.1", std::string("Cookie: a") + "\r\n" + "Injected: b"};
  NormalizationProfile csic;
  csic.name = NormalizationProfile::Name::csic;

  auto out = normalize_request(doc, csic);
  CHECK(out.lines[1] == "Cookie: a\\r\\nInjected: b");

  SUBCASE("idempotent") { CHECK(normalize_request(out, csic) == out); }
}

TEST_CASE("ump_firstline keeps only the request line") {
  HttpRequestDoc doc;
  doc.lines = {"GET /a HTTP/1.1", "Host: x", "Accept: */*"};
  NormalizationProfile ump;
  ump.name = NormalizationProfile::Name::ump_firstline;
  auto out = normalize_request(doc, ump);
  REQUIRE(out.lines.size() == 1);
  CHECK(out.lines[0] == "GET /a HTTP/1.1");
  CHECK(normalize_request(out, ump) == out);
}

TEST_CASE("identity profile returns the doc unchanged") {
  HttpRequestDoc doc;
  doc.id = "d1";
  doc.lines = {"GET / HTTP/1.1", "Host: x"};
  NormalizationProfile ident;
  CHECK(normalize_request(doc, ident) == doc);
}

TEST_CASE("profile names resolve, unknown ones do not") {
  CHECK(profile_from_name("csic") == NormalizationProfile::Name::csic);
  CHECK(profile_from_name("ump") == NormalizationProfile::Name::ump_firstline);
  CHECK(code_of([] { profile_from_name("bogus"); }) == Errc::unknown_profile);
}

TEST_CASE("ids2018 sanitizer") {
  HostPool pool{{"h1.example", "h2.example"}};
  HttpRequestDoc doc;
  doc.id = "d1";
  doc.lines = {"GET /DVWA/vulnerabilities/xss/?q=1 HTTP/1.1", "Host: victim",
               "Upgrade-Insecure-Requests: 1", "Accept: */*"};

  auto out = ids2018_sanitize(doc, pool, 7);

  SUBCASE("strips the DVWA prefix") { CHECK(out.lines[0] == "GET /?q=1 HTTP/1.1"); }
  SUBCASE("drops Upgrade-Insecure-Requests") {
    for (const auto& l : out.lines) CHECK_FALSE(contains(l, "Upgrade-Insecure"));
    CHECK(out.lines.size() == doc.lines.size() - 1);
  }
  SUBCASE("redraws the host from the pool") {
    bool h1 = out.lines[1] == "Host: h1.example";
    bool h2 = out.lines[1] == "Host: h2.example";
    CHECK((h1 || h2));
  }
  SUBCASE("is a pure function of doc and seed") {
    CHECK(ids2018_sanitize(doc, pool, 7) == out);
    CHECK(ids2018_sanitize(out, pool, 7) == out);  // idempotent too
  }
  SUBCASE("no-op without Host or DVWA prefix") {
    HttpRequestDoc plain;
    plain.id = "d2";
    plain.lines = {"GET /index.html HTTP/1.1", "Accept: */*"};
    CHECK(ids2018_sanitize(plain, pool, 7) == plain);
  }
}

TEST_CASE("ids2018 profile can drop docs with non-text bodies") {
  Corpus corpus;
  HttpRequestDoc text;
  text.id = "t";
  text.lines = {"POST /a HTTP/1.1", "Host: x", "Content-Type: application/x-www-form-urlencoded",
                "", "a=1"};
  HttpRequestDoc binary;
  binary.id = "b";
  binary.lines = {"POST /b HTTP/1.1", "Host: x", "Content-Type: application/octet-stream", "",
                  "blob"};
  HttpRequestDoc headerless;
  headerless.id = "h";
  headerless.lines = {"GET /c HTTP/1.1", "Host: x"};
  corpus.docs = {text, binary, headerless};

  NormalizationProfile prof;
  prof.name = NormalizationProfile::Name::ids2018;
  prof.host_pool.hosts = {"pool.example"};
  prof.require_text_content_type = true;

  auto out = apply_profile(corpus, prof);
  REQUIRE(out.docs.size() == 2);
  CHECK(out.docs[0].id == "t");
  CHECK(out.docs[1].id == "h");
}

TEST_CASE("corpus JSONL round-trip") {
  TempDir tmp;
  Corpus corpus;
  corpus.split = Split::inference;
  for (int i = 0; i < 3; ++i) {
    HttpRequestDoc d;
    d.id = "doc-" + std::to_string(i);
    d.label = i == 2 ? Label::anomaly : Label::normal;
    d.lines = {"GET /" + std::to_string(i) + " HTTP/1.1", "Host: x"};
    d.source = "test";
    corpus.docs.push_back(d);
  }
  const std::string path = (tmp.path / "c.jsonl").string();
  save_corpus(corpus, path);
  CHECK(load_corpus(path, CorpusFormat::jsonl) == corpus);
}

TEST_CASE("corpus schema violations are rejected") {
  TempDir tmp;
  SUBCASE("bogus label") {
    auto p = tmp.file("bad.jsonl", R"({"id":"a","label":"bogus","lines":["GET / HTTP/1.1"]})" "\n");
    CHECK(code_of([&] { load_corpus(p, CorpusFormat::jsonl); }) == Errc::schema_error);
  }
  SUBCASE("missing lines field") {
    auto p = tmp.file("bad.jsonl", R"({"id":"a","label":"normal"})" "\n");
    CHECK(code_of([&] { load_corpus(p, CorpusFormat::jsonl); }) == Errc::schema_error);
  }
  SUBCASE("duplicate ids") {
    auto p = tmp.file("bad.jsonl",
                      R"({"id":"a","label":"normal","lines":["GET / HTTP/1.1"]})" "\n"
                      R"({"id":"a","label":"normal","lines":["GET / HTTP/1.1"]})" "\n");
    CHECK(code_of([&] { load_corpus(p, CorpusFormat::jsonl); }) == Errc::schema_error);
  }
  SUBCASE("anomaly in the train split") {
    auto p = tmp.file("bad.jsonl", R"({"id":"a","label":"anomaly","lines":["GET / HTTP/1.1"]})" "\n");
    CHECK(code_of([&] { load_corpus(p, CorpusFormat::jsonl, Split::train); }) ==
          Errc::schema_error);
  }
  SUBCASE("missing file") {
    CHECK(code_of([&] { load_corpus((tmp.path / "nope.jsonl").string(), CorpusFormat::jsonl); }) ==
          Errc::io_error);
  }
}

TEST_CASE("rawdir importer reads one doc per blank-line-separated segment") {
  TempDir tmp;
  tmp.file("normal/a.txt",
           "GET /1 HTTP/1.1\r\nHost: x\r\n\r\n\r\nGET /2 HTTP/1.1\r\nHost: y\r\n\r\n");
  tmp.file("anomaly/b.txt", "GET /3 HTTP/1.1\nHost: z\n");

  auto corpus = load_corpus(tmp.path.string(), CorpusFormat::rawdir);
  REQUIRE(corpus.docs.size() == 3);

  std::map<std::string, Label> by_id;
  for (const auto& d : corpus.docs) by_id[d.id] = d.label;
  CHECK(by_id.at("normal/a.txt#0") == Label::normal);
  CHECK(by_id.at("normal/a.txt#1") == Label::normal);
  CHECK(by_id.at("anomaly/b.txt#0") == Label::anomaly);
}

TEST_CASE("stratified folds on exactly divisible classes") {
  std::vector<Label> labels(20, Label::normal);
  std::fill(labels.begin() + 10, labels.end(), Label::anomaly);

  auto fold = stratified_fold_indices(labels, 5, 1);
  std::map<int, std::pair<int, int>> counts;  // fold -> (normal, anomaly)
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == Label::normal) counts[fold[i]].first++;
    else counts[fold[i]].second++;
  }
  REQUIRE(counts.size() == 5);
  for (const auto& [f, c] : counts) {
    CHECK(c.first == 2);
    CHECK(c.second == 2);
  }
}

TEST_CASE("stratified folds at benchmark scale: 36000 + 25065, k=5") {
  std::vector<Label> labels(36000 + 25065, Label::normal);
  std::fill(labels.begin() + 36000, labels.end(), Label::anomaly);

  auto fold = stratified_fold_indices(labels, 5, 42);
  std::map<int, std::pair<int, int>> counts;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == Label::normal) counts[fold[i]].first++;
    else counts[fold[i]].second++;
  }
  REQUIRE(counts.size() == 5);
  for (const auto& [f, c] : counts) {
    CHECK(c.first == 7200);
    CHECK(c.second == 5013);
  }
}

TEST_CASE("stratified folds stay within one element of the global ratio") {
  std::vector<Label> labels(13, Label::normal);
  labels.insert(labels.end(), 7, Label::anomaly);

  auto fold = stratified_fold_indices(labels, 5, 3);
  std::map<int, std::pair<int, int>> counts;
  for (size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == Label::normal) counts[fold[i]].first++;
    else counts[fold[i]].second++;
  }
  for (const auto& [f, c] : counts) {
    CHECK(c.first >= 2);   // floor(13/5)
    CHECK(c.first <= 3);   // ceil(13/5)
    CHECK(c.second >= 1);
    CHECK(c.second <= 2);
  }

  SUBCASE("deterministic given the seed") {
    CHECK(stratified_fold_indices(labels, 5, 3) == fold);
    CHECK(stratified_fold_indices(labels, 5, 4) != fold);
  }
}

TEST_CASE("stratified folds reject too-small classes") {
  std::vector<Label> labels(10, Label::normal);
  labels.insert(labels.end(), 3, Label::anomaly);
  CHECK(code_of([&] { stratified_fold_indices(labels, 5, 0); }) == Errc::class_too_small);
}

TEST_CASE("split_stratified_kfold maps ids to folds") {
  std::vector<std::string> ids;
  std::vector<Label> labels;
  for (int i = 0; i < 10; ++i) {
    ids.push_back("d" + std::to_string(i));
    labels.push_back(i < 5 ? Label::normal : Label::anomaly);
  }
  auto assignment = split_stratified_kfold(ids, labels, 5, 9);
  CHECK(assignment.k == 5);
  REQUIRE(assignment.fold_of.size() == ids.size());
  std::set<int> seen;
  for (const auto& [id, f] : assignment.fold_of) {
    CHECK(f >= 0);
    CHECK(f < 5);
    seen.insert(f);
  }
  CHECK(seen.size() == 5);
}

TEST_CASE("synthetic corpus basics") {
  SynthSpec spec;
  spec.normal = 10;
  spec.seed = 5;
  auto corpus = generate_synthetic_corpus(spec);
  REQUIRE(corpus.docs.size() == 10);
  for (const auto& d : corpus.docs) {
    CHECK(d.label == Label::normal);
    REQUIRE_FALSE(d.lines.empty());
    CHECK(contains(d.lines[0], " HTTP/1.1"));
  }
}

TEST_CASE("synthetic payload markers appear only in anomalies") {
  SynthSpec spec;
  spec.normal = 60;
  spec.anomaly = 60;
  spec.seed = 11;
  auto corpus = generate_synthetic_corpus(spec);

  auto doc_text = [](const HttpRequestDoc& d) {
    std::string all;
    for (const auto& l : d.lines) all += l + "\n";
    return all;
  };

  int anomalies_with_marker = 0;
  for (const auto& d : corpus.docs) {
    const std::string text = doc_text(d);
    bool has_marker = false;
    for (const auto& m : synthetic_payload_markers())
      if (contains(text, m)) has_marker = true;
    if (d.label == Label::normal) {
      CHECK_FALSE(has_marker);
    } else if (has_marker) {
      ++anomalies_with_marker;
    }
  }
  CHECK(anomalies_with_marker == 60);

  SUBCASE("DROP, SELECT, FROM are in the documented inventory") {
    const auto& markers = synthetic_payload_markers();
    for (const char* tok : {"DROP", "SELECT", "FROM"})
      CHECK(std::find(markers.begin(), markers.end(), tok) != markers.end());
  }
}

TEST_CASE("synthetic corpus is byte-identical across reruns") {
  TempDir tmp;
  SynthSpec spec;
  spec.normal = 25;
  spec.anomaly = 25;
  spec.seed = 77;
  auto p1 = (tmp.path / "a.jsonl").string();
  auto p2 = (tmp.path / "b.jsonl").string();
  save_corpus(generate_synthetic_corpus(spec), p1);
  save_corpus(generate_synthetic_corpus(spec), p2);
  CHECK(slurp(p1) == slurp(p2));
  spec.seed = 78;
  auto p3 = (tmp.path / "c.jsonl").string();
  save_corpus(generate_synthetic_corpus(spec), p3);
  CHECK(slurp(p1) != slurp(p3));
}

TEST_CASE("planted token lands in every anomaly and no normal doc") {
  SynthSpec spec;
  spec.normal = 30;
  spec.anomaly = 30;
  spec.seed = 2;
  spec.planted_token = "ZQXJKV";
  spec.planted_only = true;
  auto corpus = generate_synthetic_corpus(spec);

  for (const auto& d : corpus.docs) {
    bool found = false;
    for (const auto& l : d.lines) found = found || contains(l, "ZQXJKV");
    CHECK(found == (d.label == Label::anomaly));
  }
}
