#include "alignforge/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

#include "alignforge/common.hpp"
#include "alignforge/random.hpp"

namespace alignforge::pipeline {

using nlohmann::json;
namespace fs = std::filesystem;
using trainer::Method;

// ---------------------------------------------------------------------------
// Configuration

void apply_override(json& doc, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos || eq == 0) {
    throw UsageError("override '" + std::string(assignment) + "' is not of the form key=value");
  }
  const std::string key(assignment.substr(0, eq));
  const std::string raw(assignment.substr(eq + 1));
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::exception&) {
    value = raw;
  }
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) throw UsageError("override key '" + key + "' has an empty component");
    if (!node->is_object()) throw UsageError("override key '" + key + "' descends into a non-object");
    if (dot == std::string::npos) {
      (*node)[part] = value;
      return;
    }
    node = &(*node)[part];
    if (node->is_null()) *node = json::object();
    start = dot + 1;
  }
}

namespace {

void check_keys(const json& obj, std::string_view where, std::initializer_list<std::string_view> allowed) {
  if (!obj.is_object()) throw UsageError("config: '" + std::string(where) + "' must be an object");
  for (const auto& [key, _] : obj.items()) {
    if (std::find(allowed.begin(), allowed.end(), key) == allowed.end()) {
      throw UsageError("config: unknown key '" + key + "' in '" + std::string(where) + "'");
    }
  }
}

template <typename T>
void read(const json& obj, const char* key, T& out, std::string_view where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<T>();
  } catch (const json::exception&) {
    throw UsageError("config: '" + std::string(where) + "." + key + "' has the wrong type");
  }
}

const json& section(const json& doc, const char* key) {
  static const json empty = json::object();
  return doc.contains(key) ? doc.at(key) : empty;
}

trainer::TrainConfig train_config(const json& j, std::string_view where, Method method,
                                  std::uint64_t default_seed) {
  check_keys(j, where,
             {"epochs", "batch_size", "learning_rate", "adam_beta1", "adam_beta2", "adam_eps",
              "grad_clip_norm", "seed", "eval_every", "eval_size", "parallelism", "beta",
              "lambda_d", "lambda_u"});
  trainer::TrainConfig c;
  c.method = method;
  c.seed = default_seed;
  read(j, "epochs", c.epochs, where);
  read(j, "batch_size", c.batch_size, where);
  read(j, "learning_rate", c.learning_rate, where);
  read(j, "adam_beta1", c.adam_beta1, where);
  read(j, "adam_beta2", c.adam_beta2, where);
  read(j, "adam_eps", c.adam_eps, where);
  read(j, "grad_clip_norm", c.grad_clip_norm, where);
  read(j, "seed", c.seed, where);
  read(j, "eval_every", c.eval_every, where);
  read(j, "eval_size", c.eval_size, where);
  read(j, "parallelism", c.parallelism, where);
  if (method == Method::dpo) read(j, "beta", c.dpo.beta, where);
  if (method == Method::kto) {
    read(j, "beta", c.kto.beta, where);
    read(j, "lambda_d", c.kto.lambda_d, where);
    read(j, "lambda_u", c.kto.lambda_u, where);
  }
  if (method == Method::sft && (j.contains("beta") || j.contains("lambda_d") || j.contains("lambda_u"))) {
    throw UsageError("config: '" + std::string(where) + "' is an sft section; beta/lambda do not apply");
  }
  c.validate();
  return c;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  const fs::path path(p);
  return (path.is_absolute() ? path : base / path).lexically_normal();
}

}  // namespace

PipelineConfig config_from_json(const json& doc, const fs::path& base_dir) {
  check_keys(doc, "<root>", {"seed", "paths", "rewrite", "model", "train", "generate", "eval", "plans"});
  PipelineConfig c;
  c.snapshot = doc;
  if (!doc.contains("seed")) throw UsageError("config: 'seed' is required");
  read(doc, "seed", c.seed, "<root>");

  const json& paths = section(doc, "paths");
  check_keys(paths, "paths", {"raw_train", "raw_test", "raw_pretrain", "work_dir"});
  for (const char* key : {"raw_train", "raw_test", "work_dir"}) {
    if (!paths.contains(key)) throw UsageError(std::string("config: 'paths.") + key + "' is required");
  }
  c.raw_train = resolve(base_dir, paths.at("raw_train").get<std::string>());
  c.raw_test = resolve(base_dir, paths.at("raw_test").get<std::string>());
  c.work_dir = resolve(base_dir, paths.at("work_dir").get<std::string>());
  if (paths.contains("raw_pretrain") && !paths["raw_pretrain"].is_null()) {
    c.raw_pretrain = resolve(base_dir, paths.at("raw_pretrain").get<std::string>());
  }

  const json& rw = section(doc, "rewrite");
  check_keys(rw, "rewrite",
             {"backend", "concurrency", "max_retries", "er_fraction", "max_failure_rate",
              "backoff_base_seconds", "backoff_cap_seconds", "model", "temperature", "er_template",
              "eqsr_template"});
  read(rw, "backend", c.rewrite.backend, "rewrite");
  read(rw, "concurrency", c.rewrite.concurrency, "rewrite");
  read(rw, "max_retries", c.rewrite.max_retries, "rewrite");
  read(rw, "er_fraction", c.rewrite.er_fraction, "rewrite");
  read(rw, "max_failure_rate", c.rewrite.max_failure_rate, "rewrite");
  read(rw, "backoff_base_seconds", c.rewrite.backoff_base_seconds, "rewrite");
  read(rw, "backoff_cap_seconds", c.rewrite.backoff_cap_seconds, "rewrite");
  read(rw, "model", c.rewrite.generation.model, "rewrite");
  read(rw, "temperature", c.rewrite.generation.temperature, "rewrite");
  if (rw.contains("er_template") && !rw["er_template"].is_null()) {
    c.rewrite.er_template = rw["er_template"].get<std::string>();
    rewriter::PromptTemplate{*c.rewrite.er_template, rewriter::Kind::er}.validate();
  }
  if (rw.contains("eqsr_template") && !rw["eqsr_template"].is_null()) {
    c.rewrite.eqsr_template = rw["eqsr_template"].get<std::string>();
    rewriter::PromptTemplate{*c.rewrite.eqsr_template, rewriter::Kind::eqsr}.validate();
  }
  if (c.rewrite.backend != "mock" && c.rewrite.backend != "network") {
    throw UsageError("config: rewrite.backend must be 'mock' or 'network'");
  }
  if (!(c.rewrite.er_fraction > 0.0 && c.rewrite.er_fraction < 1.0)) {
    throw UsageError("config: rewrite.er_fraction must lie strictly between 0 and 1");
  }
  if (c.rewrite.concurrency < 1) throw UsageError("config: rewrite.concurrency must be at least 1");

  const json& model = section(doc, "model");
  check_keys(model, "model", {"n_layers", "n_heads", "d_model", "d_ff", "context_len"});
  read(model, "n_layers", c.model.n_layers, "model");
  read(model, "n_heads", c.model.n_heads, "model");
  read(model, "d_model", c.model.d_model, "model");
  read(model, "d_ff", c.model.d_ff, "model");
  read(model, "context_len", c.model.context_len, "model");
  c.model.init_seed = mix_seed(c.seed, 0x1417);
  c.model.validate();

  const json& train = section(doc, "train");
  check_keys(train, "train", {"instruction", "pretrain", "sft", "dpo", "kto"});
  read(train, "instruction", c.instruction, "train");
  c.pretrain = train_config(section(train, "pretrain"), "train.pretrain", Method::sft, mix_seed(c.seed, 1));
  c.sft = train_config(section(train, "sft"), "train.sft", Method::sft, mix_seed(c.seed, 2));
  c.dpo = train_config(section(train, "dpo"), "train.dpo", Method::dpo, mix_seed(c.seed, 3));
  c.kto = train_config(section(train, "kto"), "train.kto", Method::kto, mix_seed(c.seed, 4));

  const json& gen = section(doc, "generate");
  check_keys(gen, "generate", {"max_new", "temperature", "baseline_instruction"});
  read(gen, "max_new", c.generate.max_new, "generate");
  read(gen, "temperature", c.generate.temperature, "generate");
  read(gen, "baseline_instruction", c.generate.baseline_instruction, "generate");
  if (c.generate.max_new < 0 || c.generate.temperature < 0.0) {
    throw UsageError("config: generate.max_new and generate.temperature must be non-negative");
  }

  const json& ev = section(doc, "eval");
  check_keys(ev, "eval", {"judge_backend", "methods", "preference_methods", "preference_dimensions"});
  read(ev, "judge_backend", c.eval.judge_backend, "eval");
  if (c.eval.judge_backend != "mock" && c.eval.judge_backend != "network") {
    throw UsageError("config: eval.judge_backend must be 'mock' or 'network'");
  }
  read(doc, "plans", c.plans, "<root>");
  if (!doc.contains("plans")) c.plans = plan_names();
  c.eval.methods = c.plans;
  read(ev, "methods", c.eval.methods, "eval");
  c.eval.preference_methods = c.eval.methods;
  read(ev, "preference_methods", c.eval.preference_methods, "eval");
  if (ev.contains("preference_dimensions")) {
    c.eval.preference_dimensions.clear();
    for (const auto& d : ev["preference_dimensions"]) {
      c.eval.preference_dimensions.push_back(eval::parse_preference_dimension(d.get<std::string>()));
    }
  }
  for (const auto* list : {&c.plans, &c.eval.methods, &c.eval.preference_methods}) {
    for (const auto& name : *list) plan_stages(name);
  }
  return c;
}

PipelineConfig load_config(const fs::path& path, const std::vector<std::string>& overrides) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw UsageError("config " + path.string() + ": " + e.what());
  } catch (const DataError& e) {
    throw UsageError(e.what());
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc, path.parent_path());
}

// ---------------------------------------------------------------------------
// Plans and data

const std::vector<std::string>& plan_names() {
  static const std::vector<std::string> names = {
      "base",     "prompt",   "er_sft",          "eqsr_sft",        "eqsr_dpo",
      "eqsr_kto", "er_sft+eqsr_sft", "er_sft+eqsr_dpo", "er_sft+eqsr_kto"};
  return names;
}

std::vector<std::pair<std::string, Method>> plan_stages(std::string_view plan) {
  const auto& names = plan_names();
  if (std::find(names.begin(), names.end(), plan) == names.end()) {
    std::string valid;
    for (const auto& n : names) valid += (valid.empty() ? "" : ", ") + n;
    throw UsageError("unknown plan '" + std::string(plan) + "'; valid plans: " + valid);
  }
  std::vector<std::pair<std::string, Method>> stages;
  std::string_view rest = plan;
  while (!rest.empty() && plan != "base" && plan != "prompt") {
    const auto plus = rest.find('+');
    const auto part = rest.substr(0, plus);
    const auto us = part.find('_');
    stages.emplace_back(std::string(part.substr(0, us)), trainer::parse_method(part.substr(us + 1)));
    if (plus == std::string_view::npos) break;
    rest.remove_prefix(plus + 1);
  }
  return stages;
}

namespace {

using tinylm::Tokens;

Tokens with_eos(std::string_view text, int vocab) {
  Tokens t = tinylm::encode(text);
  t.push_back(tinylm::special_tokens(vocab).eos);
  return t;
}

Tokens prompt_tokens(std::string_view instruction, std::string_view question) {
  return tinylm::encode(trainer::render_prompt(instruction, question));
}

}  // namespace

std::vector<trainer::SequenceExample> make_sft_data(
    const std::vector<std::pair<std::string, std::string>>& prompt_completion,
    std::string_view instruction, int context_len) {
  std::vector<trainer::SequenceExample> out;
  out.reserve(prompt_completion.size());
  for (const auto& [prompt, completion] : prompt_completion) {
    auto fitted = tinylm::fit_to_context(prompt_tokens(instruction, prompt),
                                         with_eos(completion, tinylm::kDefaultVocab), context_len);
    out.push_back({std::move(fitted.prompt), std::move(fitted.completion)});
  }
  return out;
}

std::vector<trainer::PreferenceExample> make_dpo_data(const std::vector<corpus::PreferencePair>& pairs,
                                                      std::string_view instruction, int context_len) {
  std::vector<trainer::PreferenceExample> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    const Tokens prompt = prompt_tokens(instruction, p.prompt);
    const Tokens chosen = with_eos(p.chosen, tinylm::kDefaultVocab);
    const Tokens rejected = with_eos(p.rejected, tinylm::kDefaultVocab);
    // Both completions share one prompt, cut to fit the longer of the two.
    const Tokens& longer = chosen.size() >= rejected.size() ? chosen : rejected;
    const Tokens shared = tinylm::fit_to_context(prompt, longer, context_len).prompt;
    out.push_back({shared, tinylm::fit_to_context(shared, chosen, context_len).completion,
                   tinylm::fit_to_context(shared, rejected, context_len).completion});
  }
  return out;
}

std::vector<trainer::KTOTokenExample> make_kto_data(const std::vector<corpus::KTOExample>& examples,
                                                    std::string_view instruction, int context_len) {
  std::vector<trainer::KTOTokenExample> out;
  out.reserve(examples.size());
  for (const auto& e : examples) {
    auto fitted = tinylm::fit_to_context(prompt_tokens(instruction, e.prompt),
                                         with_eos(e.completion, tinylm::kDefaultVocab), context_len);
    out.push_back({std::move(fitted.prompt), std::move(fitted.completion), e.desirable});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Clients

std::unique_ptr<chat::ChatClient> make_rewrite_client(const PipelineConfig& config) {
  if (config.rewrite.backend == "network") {
    return std::make_unique<chat::HttpChatClient>(chat::http_config_from_env());
  }
  return std::make_unique<rewriter::MockRewriteClient>(mix_seed(config.seed, 0x3e));
}

std::unique_ptr<chat::ChatClient> make_judge_client(const PipelineConfig& config) {
  if (config.eval.judge_backend == "network") {
    return std::make_unique<chat::HttpChatClient>(chat::http_config_from_env());
  }
  return std::make_unique<eval::MockJudgeClient>();
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::string dump_line(const json& j) {
  return j.dump(-1, ' ', false, json::error_handler_t::replace) + "\n";
}

void require_file(const fs::path& path, std::string_view produced_by) {
  if (!fs::exists(path)) {
    throw DataError(path.string() + " does not exist; run '" + std::string(produced_by) + "' first");
  }
}

std::vector<json> read_jsonl(const fs::path& path) {
  std::istringstream in(read_file(path));
  std::vector<json> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(path.string() + " line " + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_failures(const fs::path& path, const std::vector<rewriter::RewriteFailure>& failures) {
  std::string text;
  for (const auto& f : failures) {
    text += dump_line({{"id", f.dialogue_id}, {"reason", f.reason}, {"attempts", f.attempts}});
  }
  write_file(path, text);
}

rewriter::RewriteOptions rewrite_options(const PipelineConfig& config, std::uint64_t salt) {
  rewriter::RewriteOptions o;
  o.concurrency = config.rewrite.concurrency;
  o.max_retries = config.rewrite.max_retries;
  o.backoff_base_seconds = config.rewrite.backoff_base_seconds;
  o.backoff_cap_seconds = config.rewrite.backoff_cap_seconds;
  o.seed = mix_seed(config.seed, salt);
  o.generation = config.rewrite.generation;
  if (config.rewrite.er_template) o.er_template = {*config.rewrite.er_template, rewriter::Kind::er};
  if (config.rewrite.eqsr_template) o.eqsr_template = {*config.rewrite.eqsr_template, rewriter::Kind::eqsr};
  return o;
}

trainer::ResolvedData resolve_dataset(const PipelineConfig& config, const std::string& id, Method method) {
  const WorkPaths work{config.work_dir};
  const int ctx = config.model.context_len;
  trainer::ResolvedData out;
  if (id == "pretrain") {
    require_file(work.pretrain(), "ingest");
    std::vector<std::pair<std::string, std::string>> rows;
    for (const auto& d : corpus::load_dataset(work.pretrain(), corpus::Split::train)) {
      rows.emplace_back(d.patient_query, d.doctor_response);
    }
    out.data = make_sft_data(rows, config.instruction, ctx);
    out.sha256 = sha256_file(work.pretrain());
  } else if (id == "original") {
    require_file(work.train(), "ingest");
    std::vector<std::pair<std::string, std::string>> rows;
    for (const auto& d : corpus::load_dataset(work.train(), corpus::Split::train)) {
      rows.emplace_back(d.patient_query, d.doctor_response);
    }
    out.data = make_sft_data(rows, config.instruction, ctx);
    out.sha256 = sha256_file(work.train());
  } else if (id == "er") {
    require_file(work.er(), "rewrite er");
    if (method != Method::sft) throw UsageError("the er dataset supports sft only");
    std::vector<std::pair<std::string, std::string>> rows;
    for (const auto& e : corpus::load_er(work.er())) rows.emplace_back(e.patient_query, e.empathetic_response);
    out.data = make_sft_data(rows, config.instruction, ctx);
    out.sha256 = sha256_file(work.er());
  } else if (id == "eqsr") {
    require_file(work.eqsr(), "rewrite eqsr");
    const auto examples = corpus::load_eqsr(work.eqsr());
    if (method == Method::sft) {
      std::vector<std::pair<std::string, std::string>> rows;
      for (const auto& e : examples) rows.emplace_back(e.emotional_query, e.soothing_response);
      out.data = make_sft_data(rows, config.instruction, ctx);
    } else if (method == Method::dpo) {
      out.data = make_dpo_data(corpus::to_preference_pairs(examples).pairs, config.instruction, ctx);
    } else {
      out.data = make_kto_data(corpus::to_kto_examples(examples), config.instruction, ctx);
    }
    out.sha256 = sha256_file(work.eqsr());
  } else {
    throw UsageError("unknown dataset '" + id + "'");
  }
  return out;
}

const trainer::TrainConfig& method_config(const PipelineConfig& config, Method m) {
  return m == Method::sft ? config.sft : m == Method::dpo ? config.dpo : config.kto;
}

void print_stages(const trainer::PlanResult& result, std::ostream& out) {
  for (const auto& r : result.records) {
    if (r.checkpoint.empty()) continue;
    out << "  stage " << r.stage << ": " << r.step << " steps, eval loss " << r.loss;
    if (const auto m = r.diagnostics.find("margin"); m != r.diagnostics.end()) out << ", margin " << m->second;
    if (const auto z = r.diagnostics.find("z0"); z != r.diagnostics.end()) out << ", z0 " << z->second;
    out << " -> " << r.checkpoint << "\n";
  }
}

// Trains the base model (SFT from a random init on the pretraining corpus)
// unless an up-to-date one exists.
void ensure_base_model(const PipelineConfig& config, std::ostream& out) {
  const WorkPaths work{config.work_dir};
  const std::string dataset = config.raw_pretrain ? "pretrain" : "original";
  const fs::path data = config.raw_pretrain ? work.pretrain() : work.train();
  require_file(data, "ingest");
  const json key_doc = {{"model", config.snapshot.value("model", json::object())},
                        {"seed", config.seed},
                        {"pretrain", section(section(config.snapshot, "train"), "pretrain")},
                        {"instruction", config.instruction},
                        {"data", sha256_file(data)}};
  const std::string key = sha256_hex(key_doc.dump()) + "\n";
  const fs::path key_path = work.pretrain_dir() / "key.txt";
  if (fs::exists(work.base_checkpoint()) && fs::exists(key_path) && read_file(key_path) == key) return;

  out << "training base model on " << data.filename().string() << "\n";
  tinylm::save_checkpoint(tinylm::init_params(config.model), work.init_checkpoint());
  trainer::StagePlan plan{"pretrain", {{dataset, config.pretrain}}, work.init_checkpoint(),
                          work.pretrain_dir()};
  const auto result = trainer::run_plan(plan, [&](const std::string& id, Method m) {
    return resolve_dataset(config, id, m);
  });
  print_stages(result, out);
  write_file(key_path, key);
}

}  // namespace

int cmd_synthesize(const PipelineConfig& config, std::size_t train_count, std::size_t test_count,
                   std::size_t pretrain_count, std::ostream& out) {
  corpus::save_dataset(config.raw_train, corpus::synthesize_corpus(train_count, config.seed,
                                                                   corpus::Split::train, "synthetic"));
  corpus::save_dataset(config.raw_test, corpus::synthesize_corpus(test_count, config.seed,
                                                                  corpus::Split::test, "synthetic"));
  out << "wrote " << train_count << " training and " << test_count << " test dialogues\n";
  if (config.raw_pretrain) {
    corpus::save_dataset(*config.raw_pretrain,
                         corpus::synthesize_corpus(pretrain_count, mix_seed(config.seed, 0x9e),
                                                   corpus::Split::train, "pretrain"));
    out << "wrote " << pretrain_count << " pretraining dialogues\n";
  }
  return kExitOk;
}

int cmd_ingest(const PipelineConfig& config, std::ostream& out) {
  const WorkPaths work{config.work_dir};
  const auto train = corpus::load_dataset(config.raw_train, corpus::Split::train);
  const auto test = corpus::load_dataset(config.raw_test, corpus::Split::test);
  std::set<std::string> ids;
  for (const auto* set : {&train, &test}) {
    for (const auto& d : *set) {
      corpus::validate(d);
      if (!ids.insert(d.id).second) throw DataError("duplicate dialogue id '" + d.id + "' across splits");
    }
  }
  corpus::save_dataset(work.train(), train);
  corpus::save_dataset(work.test(), test);
  out << "ingested " << train.size() << " training and " << test.size() << " test dialogues\n";
  if (config.raw_pretrain) {
    const auto pretrain = corpus::load_dataset(*config.raw_pretrain, corpus::Split::train);
    std::set<std::string> pretrain_ids;
    for (const auto& d : pretrain) {
      corpus::validate(d);
      if (!pretrain_ids.insert(d.id).second) {
        throw DataError("duplicate pretraining dialogue id '" + d.id + "'");
      }
    }
    corpus::save_dataset(work.pretrain(), pretrain);
    out << "ingested " << pretrain.size() << " pretraining dialogues\n";
  }
  return kExitOk;
}

int cmd_rewrite(const PipelineConfig& config, rewriter::Kind subset, std::ostream& out, std::ostream& err) {
  const WorkPaths work{config.work_dir};
  require_file(work.train(), "ingest");
  const auto train = corpus::load_dataset(work.train(), corpus::Split::train);
  const auto parts = corpus::split_for_rewriting(train, config.rewrite.er_fraction, config.seed);
  const auto client = make_rewrite_client(config);

  std::size_t attempted = 0, failed = 0;
  auto report = [&](std::string_view name, std::size_t ok, const std::vector<rewriter::RewriteFailure>& f) {
    out << name << ": " << ok << " rewritten, " << f.size() << " failed\n";
    for (const auto& x : f) err << "  " << x.dialogue_id << ": " << x.reason << "\n";
    attempted += ok + f.size();
    failed += f.size();
  };

  if (subset == rewriter::Kind::er) {
    const auto batch = rewriter::rewrite_batch(parts.er_part, std::nullopt, rewriter::Kind::er, *client,
                                               rewrite_options(config, 0xe7));
    corpus::save_er(work.er(), batch.er);
    write_failures(work.failures("er"), batch.failures);
    report("er", batch.er.size(), batch.failures);
  } else {
    const auto emotions = rewriter::assign_emotions(parts.eqsr_part.size(), mix_seed(config.seed, 0xe9));
    const auto batch = rewriter::rewrite_batch(parts.eqsr_part, emotions, rewriter::Kind::eqsr, *client,
                                               rewrite_options(config, 0xe5));
    corpus::save_eqsr(work.eqsr(), batch.eqsr);
    write_failures(work.failures("eqsr"), batch.failures);
    report("eqsr", batch.eqsr.size(), batch.failures);

    // The test set is adapted the same way as the EQ+SR training subset.
    require_file(work.test(), "ingest");
    const auto test = corpus::load_dataset(work.test(), corpus::Split::test);
    const auto test_emotions = rewriter::assign_emotions(test.size(), mix_seed(config.seed, 0x7e57));
    const auto test_batch = rewriter::rewrite_batch(test, test_emotions, rewriter::Kind::eqsr, *client,
                                                    rewrite_options(config, 0x7e));
    corpus::save_eqsr(work.test_eqsr(), test_batch.eqsr);
    write_failures(work.failures("test_eqsr"), test_batch.failures);
    report("test eqsr", test_batch.eqsr.size(), test_batch.failures);
  }

  const double rate = attempted ? static_cast<double>(failed) / static_cast<double>(attempted) : 0.0;
  if (rate > config.rewrite.max_failure_rate) {
    err << "rewrite failure rate " << rate << " exceeds the configured maximum "
        << config.rewrite.max_failure_rate << "\n";
    return kExitBackend;
  }
  return kExitOk;
}

int cmd_train(const PipelineConfig& config, std::string_view plan, std::ostream& out, std::ostream&) {
  const auto stages = plan_stages(plan);
  const WorkPaths work{config.work_dir};
  ensure_base_model(config, out);

  trainer::StagePlan sp;
  sp.name = std::string(plan);
  sp.initial_checkpoint = work.base_checkpoint();
  sp.output_dir = work.run_dir(plan);
  for (const auto& [dataset, method] : stages) sp.stages.push_back({dataset, method_config(config, method)});
  out << "plan " << plan << ": " << sp.stages.size() << " stage(s)\n";
  const auto result = trainer::run_plan(sp, [&](const std::string& id, Method m) {
    return resolve_dataset(config, id, m);
  });
  print_stages(result, out);
  out << "final checkpoint: " << result.final_checkpoint.string() << "\n";
  return kExitOk;
}

int cmd_generate(const PipelineConfig& config, std::string_view plan, std::ostream& out, std::ostream& err,
                 const std::optional<fs::path>& checkpoint, const std::optional<fs::path>& test_set) {
  plan_stages(plan);
  const WorkPaths work{config.work_dir};
  const fs::path ckpt = checkpoint.value_or(work.run_dir(plan) / "final.ckpt");
  const fs::path tests = test_set.value_or(work.test_eqsr());
  require_file(ckpt, "train " + std::string(plan));
  require_file(tests, "rewrite eqsr");
  const auto params = tinylm::load_checkpoint(ckpt);
  const auto questions = corpus::load_eqsr(tests);

  std::string text;
  std::size_t truncated = 0;
  for (std::size_t i = 0; i < questions.size(); ++i) {
    tinylm::SampleOptions opts;
    opts.max_new = config.generate.max_new;
    opts.temperature = config.generate.temperature;
    opts.seed = mix_seed(config.seed, i);
    // The prompt baseline swaps the task instruction for the compassionate one.
    const std::string_view instruction =
        plan == "prompt" ? std::string_view(config.generate.baseline_instruction) : config.instruction;
    const std::string prompt = trainer::render_prompt(instruction, questions[i].emotional_query);
    bool cut = false;
    const std::string response = trainer::generate(params, prompt, opts, &cut);
    truncated += cut ? 1 : 0;
    text += dump_line({{"id", questions[i].dialogue_id},
                       {"question", questions[i].emotional_query},
                       {"response", response}});
  }
  write_file(work.responses(plan), text);
  if (truncated) err << "warning: " << truncated << " question(s) truncated from the left to fit the context\n";
  out << "generated " << questions.size() << " responses for " << plan << " -> "
      << work.responses(plan).string() << "\n";
  return kExitOk;
}

int cmd_score(const PipelineConfig& config, const std::vector<std::string>& methods_in, std::ostream& out,
              std::ostream& err) {
  const WorkPaths work{config.work_dir};
  const auto& methods = methods_in.empty() ? config.eval.methods : methods_in;
  for (const auto& m : methods) plan_stages(m);
  require_file(work.test_eqsr(), "rewrite eqsr");
  const auto tests = corpus::load_eqsr(work.test_eqsr());

  eval::ReportInputs inputs;
  inputs.methods = methods;
  for (const auto& t : tests) {
    inputs.doctor_references.push_back(t.original_response);
    inputs.modified_references.push_back(t.soothing_response);
  }

  const auto judge = make_judge_client(config);
  fs::create_directories(work.scores_dir());
  for (const auto& method : methods) {
    const fs::path path = work.responses(method);
    if (!fs::exists(path)) {
      err << "warning: no responses for " << method << "; its row is marked absent\n";
      continue;
    }
    std::vector<std::string> responses;
    const auto rows = read_jsonl(path);
    for (std::size_t i = 0; i < std::max(rows.size(), tests.size()); ++i) {
      const std::string expected = i < tests.size() ? tests[i].dialogue_id : std::string("<none>");
      const std::string found = i < rows.size() ? rows[i].value("id", std::string("<none>")) : "<none>";
      if (expected != found) {
        throw DataError(method + " responses do not align with the test set: first mismatching id '" +
                        (found == "<none>" ? expected : found) + "' at position " + std::to_string(i));
      }
      responses.push_back(rows[i].value("response", std::string()));
    }

    std::vector<eval::EmotionScores> scores;
    std::string lines;
    for (std::size_t i = 0; i < responses.size(); ++i) {
      const auto s = trim(responses[i]).empty() ? eval::EmotionScores{}
                                                : eval::judge_intensity(*judge, responses[i]);
      scores.push_back(s);
      lines += dump_line({{"id", tests[i].dialogue_id}, {"empathetic", s.empathetic},
                          {"comforting", s.comforting}, {"reassuring", s.reassuring},
                          {"mean", s.mean}, {"max", s.max}, {"parse_failure", s.parse_failure}});
    }
    write_file(work.scores_dir() / ("intensity_" + method + ".jsonl"), lines);
    if (!scores.empty()) inputs.intensity[method] = eval::aggregate_intensity(scores);
    inputs.responses[method] = std::move(responses);
  }

  std::vector<std::string> contenders;
  for (const auto& m : config.eval.preference_methods) {
    if (inputs.responses.count(m)) contenders.push_back(m);
  }
  std::string ballot_lines;
  if (contenders.size() >= 2) {
    for (std::size_t q = 0; q < tests.size(); ++q) {
      std::vector<std::pair<std::string, std::string>> candidates;
      for (const auto& m : contenders) candidates.emplace_back(m, inputs.responses[m][q]);
      for (const auto dim : config.eval.preference_dimensions) {
        const auto seed = mix_seed(mix_seed(config.seed, q), static_cast<std::uint64_t>(dim) + 0xb0);
        auto ballot = eval::judge_preference(*judge, tests[q].dialogue_id, tests[q].emotional_query,
                                             candidates, dim, seed);
        ballot_lines += dump_line({{"question_id", ballot.question_id},
                                   {"dimension", eval::to_string(ballot.dimension)},
                                   {"candidates", ballot.candidates},
                                   {"winner", ballot.winner ? json(*ballot.winner) : json(nullptr)},
                                   {"tie", ballot.tie},
                                   {"seed", ballot.seed}});
        inputs.ballots.push_back(std::move(ballot));
      }
    }
  }
  write_file(work.scores_dir() / "ballots.jsonl", ballot_lines);

  const auto report = eval::build_report(inputs);
  write_file(work.report_dir() / "report.json", eval::report_to_json(report));
  write_file(work.report_dir() / "report.csv", eval::report_to_csv(report));
  write_file(work.report_dir() / "report.txt", eval::report_to_text(report));
  out << eval::report_to_text(report);
  return kExitOk;
}

int cmd_report(const PipelineConfig& config, std::ostream& out) {
  const WorkPaths work{config.work_dir};
  require_file(work.report_dir() / "report.json", "score");
  const auto report = eval::report_from_json(read_file(work.report_dir() / "report.json"));
  write_file(work.report_dir() / "report.csv", eval::report_to_csv(report));
  write_file(work.report_dir() / "report.txt", eval::report_to_text(report));
  out << eval::report_to_text(report);
  return kExitOk;
}

int cmd_run_all(const PipelineConfig& config, std::ostream& out, std::ostream& err) {
  int rc = cmd_ingest(config, out);
  if (rc == kExitOk) rc = cmd_rewrite(config, rewriter::Kind::er, out, err);
  if (rc == kExitOk) rc = cmd_rewrite(config, rewriter::Kind::eqsr, out, err);
  for (const auto& plan : config.plans) {
    if (rc == kExitOk) rc = cmd_train(config, plan, out, err);
    if (rc == kExitOk) rc = cmd_generate(config, plan, out, err);
  }
  if (rc == kExitOk) rc = cmd_score(config, config.eval.methods, out, err);
  if (rc == kExitOk) rc = cmd_report(config, out);
  return rc;
}

int run_command(const std::function<int()>& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const chat::AuthError& e) {
    err << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const chat::TransportError& e) {
    err << "backend error: " << e.what() << "\n";
    return kExitBackend;
  } catch (const std::exception& e) {
    err << "data error: " << e.what() << "\n";
    return kExitData;
  }
}

}  // namespace alignforge::pipeline
