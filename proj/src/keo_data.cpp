#include "kse/keo_data.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "json.hpp"
#include "kse/common.hpp"

namespace kse::keo {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Instances and prompts

std::string render_prompt(const std::string& prompt_template, const std::string& subject) {
  const std::size_t slot = prompt_template.find("{}");
  require(slot != std::string::npos, "render_prompt: template has no subject slot");
  require(prompt_template.find("{}", slot + 2) == std::string::npos,
          "render_prompt: template has more than one subject slot");
  std::string out = prompt_template;
  out.replace(slot, 2, subject);
  return out;
}

namespace {

std::size_t count_slots(const std::string& s) {
  std::size_t n = 0;
  for (std::size_t p = s.find("{}"); p != std::string::npos; p = s.find("{}", p + 2)) ++n;
  return n;
}

template <typename T>
bool has_duplicates(const std::vector<T>& v) {
  std::set<T> seen(v.begin(), v.end());
  return seen.size() != v.size();
}

}  // namespace

void validate_instance(const KSEInstance& inst) {
  require(!inst.case_id.empty(), "instance: empty case_id");
  require(!inst.subject.empty(), "instance: empty subject");
  require(!inst.relation.empty(), "instance: empty relation");
  require(!inst.objects.empty(), "instance: empty objects");
  require(!inst.targets.empty(), "instance: empty targets");
  require(!has_duplicates(inst.objects), "instance: duplicate entries in objects");
  require(!has_duplicates(inst.targets), "instance: duplicate entries in targets");
  require(inst.targets.size() <= inst.objects.size(),
          "instance: more targets than object slots");
  require(count_slots(inst.edit_prompt) == 1,
          "instance: edit_prompt must contain exactly one subject slot");
  for (const auto& p : inst.paraphrase_prompts)
    require(count_slots(p) == 1,
            "instance: paraphrase prompt must contain exactly one subject slot");
  for (const auto& n : inst.neighborhood_prompts) {
    require(!n.prompt.empty(), "instance: empty neighborhood prompt");
    require(!n.answer.empty(), "instance: empty neighborhood answer");
  }
}

// ---------------------------------------------------------------------------
// Classification

Classification classify_triplets(const std::vector<Triplet>& triplets) {
  Classification out;
  out.labels.resize(triplets.size());
  out.report.total = triplets.size();
  if (triplets.empty()) return out;

  auto key2 = [](const std::string& a, const std::string& b) { return a + '\x1f' + b; };
  auto key3 = [&](const Triplet& t) {
    return t.subject + '\x1f' + t.relation + '\x1f' + t.object;
  };

  std::unordered_map<std::string, std::size_t> full_count;
  std::unordered_map<std::string, std::unordered_set<std::string>> sr_objects;
  std::unordered_map<std::string, std::unordered_set<std::string>> ro_subjects;
  std::unordered_map<std::string, std::unordered_set<std::string>> so_relations;
  for (const auto& t : triplets) {
    ++full_count[key3(t)];
    sr_objects[key2(t.subject, t.relation)].insert(t.object);
    ro_subjects[key2(t.relation, t.object)].insert(t.subject);
    so_relations[key2(t.subject, t.object)].insert(t.relation);
  }

  for (std::size_t i = 0; i < triplets.size(); ++i) {
    const Triplet& t = triplets[i];
    TripletLabels& lab = out.labels[i];
    lab.duplicate = full_count[key3(t)] >= 2;
    lab.rso = sr_objects[key2(t.subject, t.relation)].size() >= 2;
    lab.roo = ro_subjects[key2(t.relation, t.object)].size() >= 2;
    lab.soo = so_relations[key2(t.subject, t.object)].size() >= 2;
    lab.normal = !(lab.duplicate || lab.rso || lab.roo || lab.soo);
    out.report.duplicate += lab.duplicate;
    out.report.rso += lab.rso;
    out.report.roo += lab.roo;
    out.report.soo += lab.soo;
    out.report.normal += lab.normal;
  }
  out.report.normal_ratio =
      100.0 * static_cast<double>(out.report.normal) / static_cast<double>(out.report.total);
  return out;
}

// ---------------------------------------------------------------------------
// Serialization

namespace {

ordered_json instance_to_json(const KSEInstance& inst) {
  ordered_json j;
  j["case_id"] = inst.case_id;
  j["subject"] = inst.subject;
  j["relation"] = inst.relation;
  j["relation_phrase"] = inst.relation_phrase;
  j["objects"] = inst.objects;
  j["targets"] = inst.targets;
  j["edit_prompt"] = inst.edit_prompt;
  j["paraphrase_prompts"] = inst.paraphrase_prompts;
  ordered_json neigh = ordered_json::array();
  for (const auto& n : inst.neighborhood_prompts)
    neigh.push_back({{"prompt", n.prompt}, {"answer", n.answer}});
  j["neighborhood_prompts"] = neigh;
  return j;
}

KSEInstance instance_from_json(const json& j) {
  KSEInstance inst;
  inst.case_id = j.at("case_id").get<std::string>();
  inst.subject = j.at("subject").get<std::string>();
  inst.relation = j.at("relation").get<std::string>();
  inst.relation_phrase = j.at("relation_phrase").get<std::string>();
  inst.objects = j.at("objects").get<std::vector<std::string>>();
  inst.targets = j.at("targets").get<std::vector<std::string>>();
  inst.edit_prompt = j.at("edit_prompt").get<std::string>();
  inst.paraphrase_prompts = j.at("paraphrase_prompts").get<std::vector<std::string>>();
  for (const auto& n : j.at("neighborhood_prompts"))
    inst.neighborhood_prompts.push_back(
        {n.at("prompt").get<std::string>(), n.at("answer").get<std::string>()});
  return inst;
}

}  // namespace

std::vector<KSEInstance> read_editset(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "read_editset: cannot open " + path);
  std::vector<KSEInstance> out;
  std::unordered_set<std::string> seen_ids;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    KSEInstance inst;
    try {
      inst = instance_from_json(json::parse(line));
      validate_instance(inst);
    } catch (const std::exception& e) {
      fail("read_editset: " + path + " line " + std::to_string(line_no) + ": " + e.what());
    }
    require(seen_ids.insert(inst.case_id).second,
            "read_editset: " + path + " line " + std::to_string(line_no) +
                ": duplicate case_id " + inst.case_id);
    out.push_back(std::move(inst));
  }
  return out;
}

void write_editset(const std::vector<KSEInstance>& instances, const std::string& path) {
  for (const auto& inst : instances) validate_instance(inst);
  std::ofstream out(path);
  require(out.good(), "write_editset: cannot open " + path);
  for (const auto& inst : instances) out << instance_to_json(inst).dump() << '\n';
  require(out.good(), "write_editset: write failed for " + path);
}

std::vector<Triplet> read_triplets(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "read_triplets: cannot open " + path);
  std::vector<Triplet> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      json j = json::parse(line);
      Triplet t{j.at("subject").get<std::string>(), j.at("relation").get<std::string>(),
                j.at("object").get<std::string>()};
      require(!t.subject.empty() && !t.relation.empty() && !t.object.empty(),
              "empty triplet field");
      out.push_back(std::move(t));
    } catch (const std::exception& e) {
      fail("read_triplets: " + path + " line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

void write_triplets(const std::vector<Triplet>& triplets, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), "write_triplets: cannot open " + path);
  for (const auto& t : triplets) {
    ordered_json j;
    j["subject"] = t.subject;
    j["relation"] = t.relation;
    j["object"] = t.object;
    out << j.dump() << '\n';
  }
  require(out.good(), "write_triplets: write failed for " + path);
}

std::vector<Triplet> read_zsre_triplets(const std::string& path) {
  std::ifstream in(path);
  require(in.good(), "read_zsre_triplets: cannot open " + path);
  json root;
  try {
    in >> root;
  } catch (const std::exception& e) {
    fail("read_zsre_triplets: " + path + ": " + std::string(e.what()));
  }
  require(root.is_array(), "read_zsre_triplets: expected a JSON array");
  std::vector<Triplet> out;
  for (const auto& rec : root) {
    Triplet t;
    t.subject = rec.at("subject").get<std::string>();
    std::string src = rec.at("src").get<std::string>();
    const std::size_t at = src.find(t.subject);
    if (at != std::string::npos) src.replace(at, t.subject.size(), "{}");
    t.relation = src;
    const auto& answers = rec.at("answers");
    require(answers.is_array() && !answers.empty(),
            "read_zsre_triplets: record without answers");
    t.object = answers[0].get<std::string>();
    out.push_back(std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Relation registry and templates

const std::vector<RelationInfo>& relation_registry() {
  static const std::vector<RelationInfo> registry = {
      {"P101", "produces", "site",
       {"the {} factory produces", "the {} plant produces",
        "the {} workshop produces", "the {} mill produces"}},
      {"P102", "trains", "school",
       {"the {} academy trains", "the {} school trains",
        "the {} institute trains", "the {} program trains"}},
      {"P103", "exports", "port",
       {"the {} port exports", "the {} harbor exports",
        "the {} dock exports", "the {} terminal exports"}},
      {"P104", "studies", "lab",
       {"the {} lab studies", "the {} center studies",
        "the {} group studies", "the {} unit studies"}},
      {"P105", "collects", "house",
       {"the {} museum collects", "the {} gallery collects",
        "the {} archive collects", "the {} vault collects"}},
      {"P106", "breeds", "farm",
       {"the {} farm breeds", "the {} ranch breeds",
        "the {} stable breeds", "the {} kennel breeds"}},
  };
  return registry;
}

const RelationInfo* find_relation(const std::string& id) {
  for (const auto& r : relation_registry())
    if (r.id == id) return &r;
  return nullptr;
}

std::vector<std::string> generate_prompt_templates(const std::string& relation_id,
                                                   TemplateClient* client) {
  const RelationInfo* rel = find_relation(relation_id);
  require(rel != nullptr, "generate_prompt_templates: unregistered relation " + relation_id);

  std::vector<std::string> accepted;
  if (client) {
    std::vector<std::string> candidates;
    try {
      candidates = client->generate(
          "Write prompt templates with a {} subject slot expressing the relation '" +
          rel->phrase + "', one per line, imitating: " + rel->templates.front());
    } catch (const std::exception& e) {
      log_warn("template client failed (" + std::string(e.what()) +
               "); using offline templates for " + relation_id);
    }
    for (const auto& c : candidates) {
      if (count_slots(c) != 1) continue;
      if (c.find(rel->phrase) == std::string::npos) continue;
      accepted.push_back(c);
    }
  }
  if (accepted.size() < 3) {
    if (client && !accepted.empty())
      log_warn("template client yielded too few usable templates for " + relation_id +
               "; using offline templates");
    accepted = rel->templates;
  }
  return accepted;
}

// ---------------------------------------------------------------------------
// Synthetic corpus

namespace {

// Pronounceable pseudo-words, distinct across the whole run.
class WordMint {
 public:
  explicit WordMint(std::mt19937_64 rng) : rng_(std::move(rng)) {}

  std::string next(std::unordered_set<std::string>& taken) {
    static const char* consonants = "bdfgklmnprstvz";
    static const char* vowels = "aeiou";
    std::uniform_int_distribution<int> syllables(2, 3);
    std::uniform_int_distribution<int> ci(0, 13), vi(0, 4);
    for (int attempt = 0; attempt < 1000; ++attempt) {
      std::string w;
      const int n = syllables(rng_);
      for (int s = 0; s < n; ++s) {
        w += consonants[ci(rng_)];
        w += vowels[vi(rng_)];
      }
      if (taken.insert(w).second) return w;
    }
    fail("word mint exhausted");
  }

 private:
  std::mt19937_64 rng_;
};

}  // namespace

SyntheticCorpus generate_synthetic_corpus(const CorpusSpec& spec) {
  require(!spec.instance_overlaps.empty(), "corpus: no instances requested");
  require(spec.n_relations >= 1 && spec.n_relations <= relation_registry().size(),
          "corpus: relation count outside the registry range");
  require(spec.relations_per_subject >= 1 &&
              spec.relations_per_subject <= spec.n_relations,
          "corpus: relations_per_subject must be in 1..n_relations");
  std::size_t needed_objects = 0;
  for (std::size_t n : spec.instance_overlaps) {
    require(n >= 1 && n <= 8, "corpus: overlap profile entries must be in 1..8");
    needed_objects += n;
  }
  require(needed_objects <= spec.max_objects, "corpus: requested overlap exceeds object pool");

  std::unordered_set<std::string> taken;
  for (const auto& rel : relation_registry()) {
    taken.insert(rel.phrase);
    taken.insert(rel.essence);
    for (const auto& t : rel.templates) {
      std::istringstream words(t);
      std::string w;
      while (words >> w) taken.insert(w);
    }
  }
  for (const char* w : {"the", "is", "a", ","}) taken.insert(w);

  WordMint subjects(substream(spec.seed, "corpus-subjects"));
  WordMint objects(substream(spec.seed, "corpus-objects"));
  std::mt19937_64 pick_rng = substream(spec.seed, "corpus-picks");
  std::mt19937_64 target_rng = substream(spec.seed, "corpus-targets");

  SyntheticCorpus out;
  const std::size_t n_inst = spec.instance_overlaps.size();

  const std::size_t rel_per_subj = spec.relations_per_subject;
  const std::size_t n_subjects = (n_inst + rel_per_subj - 1) / rel_per_subj;

  // Subject names are variable-length sequences (one to three words) over one
  // shared pool of part words, with lengths mixed and prefix collisions
  // expected ("vena" next to "vena dogi"). A single part, an unordered bag of
  // parts, a fixed token window, or an absolute position is then ambiguous;
  // only the full ordered sequence resolves the subject.
  std::size_t n_parts = 2;
  auto capacity = [](std::size_t p) {
    return p + p * (p - 1) + p * (p - 1) * (p - 2);
  };
  while (capacity(n_parts) < n_subjects) ++n_parts;
  std::vector<std::string> parts;
  for (std::size_t i = 0; i < n_parts; ++i) parts.push_back(subjects.next(taken));
  std::vector<std::vector<std::size_t>> names;
  {
    std::vector<std::vector<std::size_t>> singles, doubles, triples;
    for (std::size_t a = 0; a < n_parts; ++a) {
      singles.push_back({a});
      for (std::size_t b = 0; b < n_parts; ++b) {
        if (b == a) continue;
        doubles.push_back({a, b});
        for (std::size_t c = 0; c < n_parts; ++c)
          if (c != a && c != b) triples.push_back({a, b, c});
      }
    }
    std::mt19937_64 name_rng = substream(spec.seed, "corpus-names");
    std::shuffle(singles.begin(), singles.end(), name_rng);
    std::shuffle(doubles.begin(), doubles.end(), name_rng);
    std::shuffle(triples.begin(), triples.end(), name_rng);
    std::vector<std::vector<std::size_t>>* pools[3] = {&singles, &doubles, &triples};
    for (std::size_t k = 0; k < n_subjects; ++k)
      for (std::size_t t = 0; t < 3; ++t) {
        auto& pool = *pools[(k + t) % 3];
        if (pool.empty()) continue;
        names.push_back(std::move(pool.back()));
        pool.pop_back();
        break;
      }
    require(names.size() == n_subjects, "corpus: subject name space exhausted");
    std::shuffle(names.begin(), names.end(), name_rng);
  }

  for (std::size_t i = 0; i < n_inst; ++i) {
    const std::size_t overlap = spec.instance_overlaps[i];
    const std::size_t subj_idx = i / rel_per_subj;
    const RelationInfo& rel =
        relation_registry()[(subj_idx + i % rel_per_subj) % spec.n_relations];

    KSEInstance inst;
    inst.case_id = "case-" + std::to_string(i);
    inst.subject.clear();
    for (std::size_t part : names[subj_idx]) {
      if (!inst.subject.empty()) inst.subject += " ";
      inst.subject += parts[part];
    }
    inst.relation = rel.id;
    inst.relation_phrase = rel.phrase;
    inst.edit_prompt = rel.templates[0];
    const std::size_t n_para =
        std::min(spec.paraphrases_per_instance, rel.templates.size() - 1);
    for (std::size_t p = 0; p < n_para; ++p)
      inst.paraphrase_prompts.push_back(rel.templates[1 + p]);
    for (std::size_t k = 0; k < overlap; ++k)
      inst.objects.push_back(objects.next(taken));
    out.instances.push_back(std::move(inst));
  }

  // Counterfactual targets graft a donor subject's object set onto the
  // instance: the donor shares the relation when possible, so the requested
  // post-edit continuation is a set the model has produced in this context.
  // When no donor is large enough (uneven overlap profiles), targets fall
  // back to a draw from the other instances' pooled objects.
  for (std::size_t i = 0; i < n_inst; ++i) {
    KSEInstance& inst = out.instances[i];
    std::vector<std::size_t> donors, fallback;
    for (std::size_t j = 0; j < n_inst; ++j) {
      if (out.instances[j].subject == inst.subject) continue;
      if (out.instances[j].objects.size() < inst.objects.size()) continue;
      fallback.push_back(j);
      if (out.instances[j].relation == inst.relation) donors.push_back(j);
    }
    if (donors.empty()) donors = fallback;
    if (!donors.empty()) {
      std::uniform_int_distribution<std::size_t> dist(0, donors.size() - 1);
      const KSEInstance& donor = out.instances[donors[dist(target_rng)]];
      inst.targets.assign(donor.objects.begin(),
                          donor.objects.begin() + inst.objects.size());
      continue;
    }
    std::vector<std::string> pool;
    for (std::size_t j = 0; j < n_inst; ++j) {
      if (out.instances[j].subject == inst.subject) continue;
      for (const auto& o : out.instances[j].objects) pool.push_back(o);
    }
    require(pool.size() >= inst.objects.size(),
            "corpus: no donor objects available for counterfactual targets");
    for (std::size_t k = 0; k < inst.objects.size(); ++k) {
      std::uniform_int_distribution<std::size_t> dist(0, pool.size() - 1 - k);
      const std::size_t pick = dist(target_rng);
      inst.targets.push_back(pool[pick]);
      std::swap(pool[pick], pool[pool.size() - 1 - k]);
    }
  }

  // Neighborhood prompts reference other subjects' facts, which every editor
  // must leave untouched. Donors whose leading object doubles as one of this
  // instance's targets are skipped so the locality answer never ties a target.
  for (std::size_t i = 0; i < n_inst; ++i) {
    KSEInstance& inst = out.instances[i];
    if (n_inst <= 1) break;
    std::vector<std::size_t> donors;
    for (std::size_t j = 0; j < n_inst; ++j) {
      if (out.instances[j].subject == inst.subject) continue;
      const auto& lead = out.instances[j].objects[0];
      if (std::find(inst.targets.begin(), inst.targets.end(), lead) ==
          inst.targets.end())
        donors.push_back(j);
    }
    if (donors.empty()) {
      for (std::size_t j = 0; j < n_inst; ++j)
        if (j != i) donors.push_back(j);
    }
    std::uniform_int_distribution<std::size_t> donor_dist(0, donors.size() - 1);
    for (std::size_t k = 0; k < spec.neighborhood_per_instance; ++k) {
      const KSEInstance& other = out.instances[donors[donor_dist(pick_rng)]];
      const RelationInfo* rel = find_relation(other.relation);
      inst.neighborhood_prompts.push_back(
          {render_prompt(rel->templates[0], other.subject), other.objects[0]});
    }
  }

  // Training sentences: every template enumerates the full object set in a
  // per-line random order, plus one essence sentence per subject (categorized
  // by the subject's first relation). Shuffling the enumeration keeps the
  // object set genuinely unordered: a model cannot memorize object chains and
  // must consult the subject at every slot. The first-template line stays
  // plain; every paraphrase line draws a random-length lead-in of part words
  // and sometimes an appositive pair right after the subject. The decorations
  // scatter subject-part words outside the "the {} <noun>" bracket, so
  // neither absolute position nor a recency weighted bag of part tokens
  // identifies the subject; the bracket does.
  std::mt19937_64 decor_rng = substream(spec.seed, "corpus-decor");
  std::uniform_int_distribution<std::size_t> lead_len(0, 2);
  std::uniform_int_distribution<std::size_t> part_pick(0, parts.size() - 1);
  std::uniform_int_distribution<int> coin(0, 1);
  auto decorate = [&](const std::string& tpl, const std::string& subject) {
    std::string subj = subject;
    if (coin(decor_rng)) {
      const std::size_t a = part_pick(decor_rng);
      std::size_t b = part_pick(decor_rng);
      while (b == a) b = part_pick(decor_rng);
      subj += " , " + parts[a] + " " + parts[b] + " ,";
    }
    std::string line;
    const std::size_t lead = lead_len(decor_rng);
    for (std::size_t k = 0; k < lead; ++k) line += parts[part_pick(decor_rng)] + " , ";
    return line + render_prompt(tpl, subj);
  };
  std::mt19937_64 enum_rng = substream(spec.seed, "corpus-enum");
  for (std::size_t i = 0; i < n_inst; ++i) {
    const KSEInstance& inst = out.instances[i];
    const RelationInfo* rel = find_relation(inst.relation);
    auto enumeration = [&] {
      std::vector<std::string> order = inst.objects;
      std::shuffle(order.begin(), order.end(), enum_rng);
      std::string s;
      for (std::size_t k = 0; k < order.size(); ++k) {
        if (k) s += " , ";
        s += order[k];
      }
      return s;
    };
    const std::size_t n_templates =
        std::min(rel->templates.size(), 1 + spec.paraphrases_per_instance);
    out.sentences.push_back(render_prompt(rel->templates[0], inst.subject) + " " +
                            enumeration());
    for (std::size_t t = 1; t < n_templates; ++t)
      out.sentences.push_back(decorate(rel->templates[t], inst.subject) + " " +
                              enumeration());
    if (i % rel_per_subj == 0)
      out.sentences.push_back(inst.subject + " is a " + rel->essence);
    for (const auto& o : inst.objects)
      out.triplets.push_back({inst.subject, inst.relation, o});
  }

  return out;
}

}  // namespace kse::keo
