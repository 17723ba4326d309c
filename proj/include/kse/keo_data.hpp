#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace kse::keo {

struct Triplet {
  std::string subject;
  std::string relation;
  std::string object;
  bool operator==(const Triplet&) const = default;
};

struct NeighborhoodPrompt {
  std::string prompt;
  std::string answer;
  bool operator==(const NeighborhoodPrompt&) const = default;
};

// One set-valued edit request: (s, r, O) -> (s, r, O*). Prompts carry a "{}"
// subject slot; neighborhood prompts are pre-rendered with their own subject.
struct KSEInstance {
  std::string case_id;
  std::string subject;
  std::string relation;
  std::string relation_phrase;
  std::vector<std::string> objects;
  std::vector<std::string> targets;
  std::string edit_prompt;
  std::vector<std::string> paraphrase_prompts;
  std::vector<NeighborhoodPrompt> neighborhood_prompts;
  bool operator==(const KSEInstance&) const = default;
};

// Throws kse::Error describing the first violated field constraint.
void validate_instance(const KSEInstance& inst);

// Replaces the single "{}" slot with the subject.
std::string render_prompt(const std::string& prompt_template, const std::string& subject);

struct TripletLabels {
  bool duplicate = false;
  bool rso = false;  // same subject and relation, different object
  bool roo = false;  // same relation and object, different subject
  bool soo = false;  // same subject and object, different relation
  bool normal = false;
};

struct OverlapReport {
  std::size_t normal = 0, rso = 0, roo = 0, soo = 0, duplicate = 0, total = 0;
  double normal_ratio = 0.0;  // percent
};

struct Classification {
  std::vector<TripletLabels> labels;  // parallel to the input list
  OverlapReport report;
};

// Labels every triplet with each overlap category it satisfies against any
// other triplet in the list. Categories may co-occur; Normal means no other
// triplet shares two or more elements.
Classification classify_triplets(const std::vector<Triplet>& triplets);

// One JSON object per line; see the EditSet record schema in the README.
std::vector<KSEInstance> read_editset(const std::string& path);
void write_editset(const std::vector<KSEInstance>& instances, const std::string& path);

// Plain triplet JSONL: {"subject": ..., "relation": ..., "object": ...}.
std::vector<Triplet> read_triplets(const std::string& path);
void write_triplets(const std::vector<Triplet>& triplets, const std::string& path);

// Adapter for the zsRE question-answering format (JSON array of records with
// "subject", "src", and "answers" fields): relation becomes the question with
// the subject replaced by "{}", object the first answer.
std::vector<Triplet> read_zsre_triplets(const std::string& path);

struct RelationInfo {
  std::string id;          // Wikidata property style, e.g. "P101"
  std::string phrase;      // final prompt word, e.g. "produces"
  std::string essence;     // essence-category noun for "{} is a ..."
  std::vector<std::string> templates;  // each contains exactly one "{}"
};

const std::vector<RelationInfo>& relation_registry();
const RelationInfo* find_relation(const std::string& id);

// External text-generation client for template candidates; mock in tests.
class TemplateClient {
 public:
  virtual ~TemplateClient() = default;
  virtual std::vector<std::string> generate(const std::string& instruction) = 0;
};

// Candidate templates for a registered relation. Client output is filtered
// (exactly one "{}" slot, mentions the relation phrase); client errors fall
// back to the registry's offline templates.
std::vector<std::string> generate_prompt_templates(const std::string& relation_id,
                                                   TemplateClient* client = nullptr);

struct CorpusSpec {
  // One entry per instance: its object-set size N (1..8).
  std::vector<std::size_t> instance_overlaps;
  std::size_t n_relations = 4;            // cycled across instances
  // Consecutive instances share a subject across this many distinct relations,
  // which forces a trained model to factor subject identity out of any single
  // (subject, relation) pattern.
  std::size_t relations_per_subject = 1;
  std::size_t paraphrases_per_instance = 2;
  std::size_t neighborhood_per_instance = 2;
  std::size_t max_objects = 4096;         // object-pool capacity
  std::uint64_t seed = 7;
};

struct SyntheticCorpus {
  std::vector<std::string> sentences;   // training corpus, deterministic order
  std::vector<KSEInstance> instances;
  std::vector<Triplet> triplets;        // pre-edit (s, r, o) per instance object
};

// Deterministic synthetic world: subjects are variable-length pseudo-word
// sequences over one shared part pool, enumeration sentences (with part-word
// decorations and per-line object order) for every template of each instance,
// and one essence sentence per subject. Counterfactual targets graft a
// same-relation donor subject's object set onto the instance.
SyntheticCorpus generate_synthetic_corpus(const CorpusSpec& spec);

}  // namespace kse::keo
