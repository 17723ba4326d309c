#include "kse/keo_data.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "kse/common.hpp"

using namespace kse;
using namespace kse::keo;

namespace {

std::string fixture_path(const std::string& name) {
  return std::string(KSE_SOURCE_DIR) + "/data/" + name;
}

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

KSEInstance sample_instance() {
  KSEInstance inst;
  inst.case_id = "case-x";
  inst.subject = "voba";
  inst.relation = "P101";
  inst.relation_phrase = "produces";
  inst.objects = {"kema", "ruti"};
  inst.targets = {"dilo", "zapu"};
  inst.edit_prompt = "the {} factory produces";
  inst.paraphrase_prompts = {"the {} plant produces"};
  inst.neighborhood_prompts = {{"the gedo factory produces", "mana"}};
  return inst;
}

}  // namespace

TEST_CASE("render_prompt substitutes the single subject slot") {
  CHECK(render_prompt("the {} factory produces", "voba") == "the voba factory produces");
  CHECK_THROWS_AS(render_prompt("no slot here", "voba"), Error);
  CHECK_THROWS_AS(render_prompt("{} and {}", "voba"), Error);
}

TEST_CASE("validate_instance enforces the record schema") {
  CHECK_NOTHROW(validate_instance(sample_instance()));

  auto bad = sample_instance();
  bad.objects.clear();
  CHECK_THROWS_AS(validate_instance(bad), Error);

  bad = sample_instance();
  bad.targets = {"dilo", "dilo"};
  CHECK_THROWS_AS(validate_instance(bad), Error);

  bad = sample_instance();
  bad.targets = {"a", "b", "c"};  // more targets than object slots
  CHECK_THROWS_AS(validate_instance(bad), Error);

  bad = sample_instance();
  bad.edit_prompt = "no slot";
  CHECK_THROWS_AS(validate_instance(bad), Error);

  bad = sample_instance();
  bad.paraphrase_prompts = {"{} twice {}"};
  CHECK_THROWS_AS(validate_instance(bad), Error);

  bad = sample_instance();
  bad.neighborhood_prompts = {{"prompt", ""}};
  CHECK_THROWS_AS(validate_instance(bad), Error);
}

TEST_CASE("same subject and relation with different objects is RSO") {
  std::vector<Triplet> ts = {{"A", "r1", "X"}, {"A", "r1", "Y"}};
  auto cls = classify_triplets(ts);
  CHECK(cls.labels[0].rso);
  CHECK(cls.labels[1].rso);
  CHECK_FALSE(cls.labels[0].normal);
  CHECK(cls.report.rso == 2);
  CHECK(cls.report.normal == 0);
}

TEST_CASE("a single shared element leaves both triplets Normal") {
  std::vector<Triplet> ts = {{"A", "r1", "X"}, {"B", "r2", "X"}};
  auto cls = classify_triplets(ts);
  CHECK(cls.labels[0].normal);
  CHECK(cls.labels[1].normal);
  CHECK(cls.report.normal == 2);
  CHECK(cls.report.normal_ratio == doctest::Approx(100.0));
}

TEST_CASE("duplicate detection requires all three elements equal") {
  std::vector<Triplet> ts = {{"A", "r1", "X"}, {"A", "r1", "X"}, {"A", "r1", "Y"}};
  auto cls = classify_triplets(ts);
  CHECK(cls.labels[0].duplicate);
  CHECK(cls.labels[1].duplicate);
  CHECK_FALSE(cls.labels[2].duplicate);
  CHECK(cls.labels[2].rso);
  CHECK(cls.report.duplicate == 2);
}

TEST_CASE("a triplet can satisfy several overlap categories at once") {
  std::vector<Triplet> ts = {
      {"A", "r1", "X"},  // RSO with #1, ROO with #2, SOO with #3
      {"A", "r1", "Y"},
      {"B", "r1", "X"},
      {"A", "r2", "X"},
  };
  auto cls = classify_triplets(ts);
  CHECK(cls.labels[0].rso);
  CHECK(cls.labels[0].roo);
  CHECK(cls.labels[0].soo);
  CHECK_FALSE(cls.labels[0].duplicate);
  CHECK_FALSE(cls.labels[0].normal);
}

TEST_CASE("classification is invariant to input order") {
  std::vector<Triplet> ts = read_triplets(fixture_path("triplets_fixture.jsonl"));
  auto base = classify_triplets(ts);

  std::vector<std::size_t> order(ts.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng = substream(11, "keo-order");
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<Triplet> shuffled;
    for (std::size_t i : order) shuffled.push_back(ts[i]);
    auto cls = classify_triplets(shuffled);
    for (std::size_t pos = 0; pos < order.size(); ++pos) {
      const auto& a = base.labels[order[pos]];
      const auto& b = cls.labels[pos];
      CHECK(a.duplicate == b.duplicate);
      CHECK(a.rso == b.rso);
      CHECK(a.roo == b.roo);
      CHECK(a.soo == b.soo);
      CHECK(a.normal == b.normal);
    }
    CHECK(cls.report.normal == base.report.normal);
  }
}

TEST_CASE("bundled triplet fixture reproduces hand-computed counts") {
  auto ts = read_triplets(fixture_path("triplets_fixture.jsonl"));
  REQUIRE(ts.size() == 10);
  auto cls = classify_triplets(ts);
  CHECK(cls.report.normal == 4);
  CHECK(cls.report.rso == 2);
  CHECK(cls.report.roo == 2);
  CHECK(cls.report.soo == 2);
  CHECK(cls.report.duplicate == 2);
  CHECK(cls.report.total == 10);
  CHECK(cls.report.normal_ratio == doctest::Approx(40.0).epsilon(1e-12));

  // Ratio always recomputes from the counts.
  CHECK(std::abs(cls.report.normal_ratio -
                 100.0 * double(cls.report.normal) / double(cls.report.total)) < 0.01);
}

TEST_CASE("empty triplet list classifies to an empty report") {
  auto cls = classify_triplets({});
  CHECK(cls.labels.empty());
  CHECK(cls.report.total == 0);
}

TEST_CASE("editset fixture round-trips field for field") {
  auto instances = read_editset(fixture_path("editset_fixture.jsonl"));
  REQUIRE(instances.size() == 10);
  const std::string tmp = temp_path("kse_editset_roundtrip.jsonl");
  write_editset(instances, tmp);
  auto again = read_editset(tmp);
  REQUIRE(again.size() == instances.size());
  for (std::size_t i = 0; i < instances.size(); ++i) CHECK(again[i] == instances[i]);
  std::remove(tmp.c_str());
}

TEST_CASE("editset reader rejects malformed records with line numbers") {
  const std::string tmp = temp_path("kse_editset_bad.jsonl");

  SUBCASE("empty file yields an empty list") {
    std::ofstream(tmp).close();
    CHECK(read_editset(tmp).empty());
  }

  SUBCASE("broken json names the line") {
    std::ofstream out(tmp);
    out << "{\"case_id\": \"a\"\n";
    out.close();
    CHECK_THROWS_WITH_AS(read_editset(tmp), doctest::Contains("line 1"), Error);
  }

  SUBCASE("empty objects array is a schema error") {
    auto inst = sample_instance();
    std::ofstream out(tmp);
    out << R"({"case_id":"c1","subject":"s","relation":"r","relation_phrase":"p",)"
        << R"("objects":[],"targets":["t"],"edit_prompt":"the {} x",)"
        << R"("paraphrase_prompts":[],"neighborhood_prompts":[]})" << '\n';
    out.close();
    CHECK_THROWS_WITH_AS(read_editset(tmp), doctest::Contains("objects"), Error);
  }

  SUBCASE("duplicate case_id is rejected") {
    write_editset({sample_instance()}, tmp);
    std::ifstream in(tmp);
    std::string line;
    std::getline(in, line);
    in.close();
    std::ofstream out(tmp);
    out << line << '\n' << line << '\n';
    out.close();
    CHECK_THROWS_WITH_AS(read_editset(tmp), doctest::Contains("duplicate case_id"), Error);
  }

  std::remove(tmp.c_str());
}

TEST_CASE("triplet files round-trip") {
  std::vector<Triplet> ts = {{"a", "r", "x"}, {"b", "r", "y"}};
  const std::string tmp = temp_path("kse_triplets_roundtrip.jsonl");
  write_triplets(ts, tmp);
  auto again = read_triplets(tmp);
  REQUIRE(again.size() == 2);
  CHECK(again[0] == ts[0]);
  CHECK(again[1] == ts[1]);
  std::remove(tmp.c_str());
}

TEST_CASE("zsre adapter maps question records to triplets") {
  const std::string tmp = temp_path("kse_zsre_sample.json");
  std::ofstream out(tmp);
  out << R"([{"subject":"Watts Humphrey","src":"What university did Watts Humphrey attend?",)"
      << R"("answers":["Trinity College"]},)"
      << R"({"subject":"Ramalinaceae","src":"Which family does Ramalinaceae belong to?",)"
      << R"("answers":["Lecanorales","other"]}])";
  out.close();
  auto ts = read_zsre_triplets(tmp);
  REQUIRE(ts.size() == 2);
  CHECK(ts[0].subject == "Watts Humphrey");
  CHECK(ts[0].relation == "What university did {} attend?");
  CHECK(ts[0].object == "Trinity College");
  CHECK(ts[1].object == "Lecanorales");
  std::remove(tmp.c_str());
}

TEST_CASE("relation registry entries are well formed") {
  const auto& reg = relation_registry();
  REQUIRE(reg.size() >= 4);
  std::set<std::string> ids;
  for (const auto& rel : reg) {
    CHECK(ids.insert(rel.id).second);
    CHECK(rel.templates.size() >= 3);
    for (const auto& t : rel.templates) {
      CHECK(t.find("{}") != std::string::npos);
      CHECK(t.find(rel.phrase) != std::string::npos);
      // Shared prefix keeps subject-position activations identical across
      // templates, so paraphrases exercise generalization, not retokenization.
      CHECK(t.rfind("the {}", 0) == 0);
    }
  }
  CHECK(find_relation("P101") != nullptr);
  CHECK(find_relation("P999") == nullptr);
}

namespace {

class FixedClient : public TemplateClient {
 public:
  explicit FixedClient(std::vector<std::string> out) : out_(std::move(out)) {}
  std::vector<std::string> generate(const std::string&) override { return out_; }

 private:
  std::vector<std::string> out_;
};

class FailingClient : public TemplateClient {
 public:
  std::vector<std::string> generate(const std::string&) override {
    throw Error("client timeout");
  }
};

}  // namespace

TEST_CASE("template generation falls back to offline templates") {
  auto offline = generate_prompt_templates("P101");
  CHECK(offline == find_relation("P101")->templates);

  FailingClient failing;
  CHECK(generate_prompt_templates("P101", &failing) == offline);

  CHECK_THROWS_AS(generate_prompt_templates("P999"), Error);
}

TEST_CASE("client candidates are filtered for slot and phrase") {
  FixedClient client({
      "the {} foundry produces",
      "the {} depot produces",
      "the {} complex produces",
      "the {} facility produces",
      "the {} yard produces",
      "the {} works produces",
      "the factory produces",        // no subject slot
      "the {} {} mill produces",     // two slots
      "the {} factory makes",        // missing relation phrase
      "",                            // empty
  });
  auto templates = generate_prompt_templates("P101", &client);
  REQUIRE(templates.size() == 6);
  CHECK(templates[0] == "the {} foundry produces");
  CHECK(templates[5] == "the {} works produces");
}

TEST_CASE("too few usable candidates also falls back") {
  FixedClient client({"the {} foundry produces", "no slot", "also no slot"});
  CHECK(generate_prompt_templates("P101", &client) == find_relation("P101")->templates);
}

TEST_CASE("synthetic corpus honors the overlap profile") {
  CorpusSpec spec;
  spec.instance_overlaps = {1, 3, 5, 8};
  spec.seed = 21;
  auto corpus = generate_synthetic_corpus(spec);
  REQUIRE(corpus.instances.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(corpus.instances[i].objects.size() == spec.instance_overlaps[i]);
    CHECK(corpus.instances[i].targets.size() == spec.instance_overlaps[i]);
    CHECK_NOTHROW(validate_instance(corpus.instances[i]));
  }
  CHECK(corpus.triplets.size() == 1 + 3 + 5 + 8);
}

TEST_CASE("profile of singletons classifies all Normal") {
  CorpusSpec spec;
  spec.instance_overlaps.assign(12, 1);
  spec.seed = 3;
  auto corpus = generate_synthetic_corpus(spec);
  auto cls = classify_triplets(corpus.triplets);
  CHECK(cls.report.normal == 12);
  CHECK(cls.report.total == 12);
  CHECK(cls.report.normal_ratio == doctest::Approx(100.0));
}

TEST_CASE("ten instances of three objects give thirty RSO triplets") {
  CorpusSpec spec;
  spec.instance_overlaps.assign(10, 3);
  spec.seed = 5;
  auto corpus = generate_synthetic_corpus(spec);
  auto cls = classify_triplets(corpus.triplets);
  CHECK(cls.report.rso == 30);
  CHECK(cls.report.normal == 0);
  CHECK(cls.report.duplicate == 0);
  CHECK(cls.report.roo == 0);
  CHECK(cls.report.soo == 0);
}

TEST_CASE("corpus generation is deterministic under the seed") {
  CorpusSpec spec;
  spec.instance_overlaps = {2, 4, 3};
  spec.seed = 7;
  auto a = generate_synthetic_corpus(spec);
  auto b = generate_synthetic_corpus(spec);
  CHECK(a.sentences == b.sentences);
  CHECK(a.instances == b.instances);
  CHECK(a.triplets == b.triplets);

  spec.seed = 8;
  auto c = generate_synthetic_corpus(spec);
  CHECK(a.instances != c.instances);
}

TEST_CASE("corpus subjects and objects are globally disjoint") {
  CorpusSpec spec;
  spec.instance_overlaps = {4, 4, 4, 4, 4};
  spec.seed = 13;
  auto corpus = generate_synthetic_corpus(spec);
  std::set<std::string> words;
  for (const auto& inst : corpus.instances) {
    CHECK(words.insert(inst.subject).second);
    for (const auto& o : inst.objects) CHECK(words.insert(o).second);
  }
}

TEST_CASE("targets are foreign objects, never the instance's own") {
  CorpusSpec spec;
  spec.instance_overlaps = {4, 4, 4, 4, 4};
  spec.seed = 13;
  auto corpus = generate_synthetic_corpus(spec);
  std::set<std::string> all_objects;
  for (const auto& inst : corpus.instances)
    all_objects.insert(inst.objects.begin(), inst.objects.end());
  for (const auto& inst : corpus.instances) {
    std::set<std::string> own(inst.objects.begin(), inst.objects.end());
    std::set<std::string> seen;
    REQUIRE(inst.targets.size() == inst.objects.size());
    for (const auto& t : inst.targets) {
      CHECK(all_objects.count(t) == 1);
      CHECK(own.count(t) == 0);
      CHECK(seen.insert(t).second);
    }
  }
}

TEST_CASE("corpus sentences cover every fact, essence, and target word") {
  CorpusSpec spec;
  spec.instance_overlaps = {2, 3, 3};
  spec.seed = 9;
  auto corpus = generate_synthetic_corpus(spec);
  std::string joined;
  for (const auto& s : corpus.sentences) joined += " " + s + " \n";

  for (const auto& inst : corpus.instances) {
    const auto* rel = find_relation(inst.relation);
    REQUIRE(rel != nullptr);
    // The edit prompt opens at least one enumeration line, and every object
    // appears in some enumeration (order is randomized per line).
    std::string prompt = render_prompt(inst.edit_prompt, inst.subject);
    CHECK(joined.find(" " + prompt + " ") != std::string::npos);
    for (const auto& o : inst.objects)
      CHECK(joined.find(" " + o + " ") != std::string::npos);
    CHECK(joined.find(inst.subject + " is a " + rel->essence) != std::string::npos);
    // Targets are borrowed from other instances, so each one already occurs
    // in object position somewhere in the training text.
    for (const auto& t : inst.targets)
      CHECK(joined.find(" " + t + " ") != std::string::npos);
    // Neighborhood prompts are about other subjects: never this instance's
    // own prompt under any registered template.
    for (const auto& n : inst.neighborhood_prompts)
      for (const auto& other_rel : relation_registry())
        CHECK(n.prompt != render_prompt(other_rel.templates[0], inst.subject));
  }
}

TEST_CASE("overlap requests beyond the object pool fail") {
  CorpusSpec spec;
  spec.instance_overlaps = {8, 8};
  spec.max_objects = 15;  // needs 16 object words
  CHECK_THROWS_WITH_AS(generate_synthetic_corpus(spec), doctest::Contains("object pool"),
                       Error);

  spec.max_objects = 4096;
  spec.instance_overlaps = {3};  // no other instance can donate targets
  CHECK_THROWS_WITH_AS(generate_synthetic_corpus(spec), doctest::Contains("donor"),
                       Error);

  spec.instance_overlaps = {3, 2};  // the only other instance is too small
  CHECK_THROWS_WITH_AS(generate_synthetic_corpus(spec), doctest::Contains("donor"),
                       Error);

  spec.instance_overlaps = {9};
  CHECK_THROWS_AS(generate_synthetic_corpus(spec), Error);
  spec.instance_overlaps = {};
  CHECK_THROWS_AS(generate_synthetic_corpus(spec), Error);
}
