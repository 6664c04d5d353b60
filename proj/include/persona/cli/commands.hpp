#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "persona/cli/chat.hpp"
#include "persona/cli/run_config.hpp"
#include "persona/corpus/dataset.hpp"
#include "persona/eval/suite.hpp"
#include "persona/training/trainer.hpp"

namespace persona::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kFailure = 1, kUsage = 2, kMissingPrerequisite = 3 };

struct Streams {
  std::ostream& out = std::cout;
  std::ostream& err = std::cerr;
};

// Runs `body`, mapping exceptions to exit codes and messages on `err`.
template <class Fn>
int guarded(std::ostream& err, Fn&& body) {
  try {
    return body();
  } catch (const PrerequisiteError& e) {
    err << "error: " << e.what() << "\n";
    return kMissingPrerequisite;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

inline RunConfig config_or_default(const std::optional<fs::path>& path) {
  return path ? load_run_config(*path) : RunConfig{};
}

inline corpus::Corpus load_required(const fs::path& path) {
  if (!fs::exists(path)) {
    throw PrerequisiteError("missing corpus file " + path.string() + " (run gen-corpus first)");
  }
  return corpus::load_jsonl(path);
}

inline model::Checkpoint load_required_checkpoint(const fs::path& path) { return model::load_checkpoint(path); }

// ---- gen-corpus ----

struct GenCorpusArgs {
  std::optional<fs::path> config;
  fs::path out;
};

inline int gen_corpus(const GenCorpusArgs& a, Streams s = {}) {
  return guarded(s.err, [&] {
    if (!a.config) {
      throw ConfigError("gen-corpus needs --config");
    }
    const RunConfig c = load_run_config(*a.config);
    const auto dataset = corpus::generate_dataset(corpus::PersonaSchema::default_schema(), c.corpus);
    const std::string hash = corpus::write_dataset(dataset, a.out);
    write_resolved_config(c, a.out);
    s.err << "train " << dataset.splits.train.size() << ", valid " << dataset.splits.valid.size() << ", test "
          << dataset.splits.test.size() << ", persona_free " << dataset.persona_free_hidden.size()
          << " examples\n";
    s.out << hash << "\n";
    return kOk;
  });
}

// ---- train ----

struct TrainArgs {
  std::optional<fs::path> config;
  std::string protocol;
  std::string persona = "none";
  fs::path out;
  std::optional<fs::path> corpus;
  std::optional<fs::path> from_checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
};

inline fs::path corpus_dir(const RunConfig& c, const std::optional<fs::path>& flag) {
  if (flag) {
    return *flag;
  }
  if (!c.train.corpus_dir.empty()) {
    return c.train.corpus_dir;
  }
  throw ConfigError("no corpus directory: pass --corpus or set train.corpus_dir");
}

inline std::string describe(const training::EpochLog& e) {
  std::ostringstream s;
  s << "epoch " << e.epoch << "  train_loss " << std::fixed << std::setprecision(4) << e.train_loss << "  val_ppl "
    << e.val_ppl << "  val_hits1 " << std::setprecision(3) << e.val_hits1 << "  (" << std::setprecision(0)
    << e.wall_ms / 1000.0 << " s)";
  return s.str();
}

inline int train(const TrainArgs& a, Streams s = {}) {
  return guarded(s.err, [&] {
    RunConfig c = config_or_default(a.config);
    if (a.seed) {
      c.train.seed = *a.seed;
    }
    if (a.epochs) {
      c.train.epochs = *a.epochs;
    }
    validate(c);
    training::Protocol protocol;
    model::PersonaMode mode;
    try {
      protocol = training::parse_protocol(a.protocol);
      mode = model::parse_persona_mode(a.persona);
      training::detector_for(protocol, mode);
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    const fs::path dir = corpus_dir(c, a.corpus);
    std::optional<model::Checkpoint> prerequisite;
    if (protocol == training::Protocol::approximator) {
      if (!a.from_checkpoint) {
        throw PrerequisiteError("the approximator protocol needs --from-checkpoint <with_encoder best.ckpt>");
      }
      prerequisite = load_required_checkpoint(*a.from_checkpoint);
    }
    const auto train_set = load_required(dir / "train.jsonl");
    const auto valid_set = load_required(dir / "valid.jsonl");
    auto plan = train_plan(c, protocol, mode);
    plan.out_dir = a.out;
    plan.on_epoch = [&](const training::EpochLog& e) { s.err << describe(e) << "\n"; };
    write_resolved_config(c, a.out);
    const auto result = training::run_training(plan, train_set, valid_set, prerequisite);
    const auto& best = result.log[result.best_epoch == 0 ? 0 : static_cast<std::size_t>(result.best_epoch - 1)];
    s.out << "best epoch " << result.best_epoch << ", val_ppl " << best.val_ppl << " -> "
          << (a.out / "best.ckpt").string() << "\n";
    return kOk;
  });
}

// ---- eval ----

struct EvalArgs {
  std::vector<fs::path> checkpoints;
  fs::path test;
  std::string splits = "full,first_half,second_half";
  std::uint64_t seed = 0;
  std::size_t k = 19;
  std::optional<fs::path> out;
};

inline std::vector<eval::Split> parse_splits(const std::string& list) {
  std::vector<eval::Split> out;
  std::stringstream ss(list);
  for (std::string item; std::getline(ss, item, ',');) {
    if (!item.empty()) {
      try {
        out.push_back(eval::parse_split(item));
      } catch (const ContractError& e) {
        throw ConfigError(e.what());
      }
    }
  }
  if (out.empty()) {
    throw ConfigError("--splits is empty");
  }
  return out;
}

// Tag for a checkpoint path: the run directory for ".../<run>/best.ckpt",
// the file stem otherwise.
inline std::string checkpoint_tag(const fs::path& p) {
  if (p.filename() == "best.ckpt" && p.has_parent_path() && !p.parent_path().filename().empty()) {
    return p.parent_path().filename().string();
  }
  return p.stem().string();
}

inline int evaluate(const EvalArgs& a, Streams s = {}) {
  return guarded(s.err, [&] {
    if (a.checkpoints.empty()) {
      throw ConfigError("eval needs at least one --checkpoints path");
    }
    const auto splits = parse_splits(a.splits);
    std::vector<eval::NamedModel> models;
    for (const auto& p : a.checkpoints) {
      models.push_back(eval::named_model(checkpoint_tag(p), load_required_checkpoint(p)));
    }
    const auto test = load_required(a.test);
    eval::EvalOptions options;
    options.k = a.k;
    const auto reports = eval::run_eval_suite(models, test, splits, a.seed, options);
    s.out << eval::format_table(reports);
    const std::string json = eval::to_json(reports).dump(2) + "\n";
    if (a.out) {
      fs::create_directories(*a.out);
      std::ofstream(*a.out / "report.json") << json;
    } else {
      s.out << json;
    }
    return kOk;
  });
}

// ---- predict-persona ----

struct PredictArgs {
  fs::path checkpoint;
  std::string history;
  bool embedding = false;
};

inline std::vector<std::string> history_entries(const std::string& arg) {
  std::vector<std::string> entries;
  if (!arg.empty() && arg.find('|') == std::string::npos && fs::is_regular_file(arg)) {
    std::ifstream f(arg);
    for (std::string line; std::getline(f, line);) {
      entries.push_back(line);
    }
    return entries;
  }
  std::stringstream ss(arg);
  for (std::string item; std::getline(ss, item, '|');) {
    entries.push_back(item);
  }
  return entries;
}

inline int predict_persona(const PredictArgs& a, Streams s = {}) {
  return guarded(s.err, [&] {
    const auto history = parse_history(history_entries(a.history));
    if (history.empty()) {
      throw ConfigError("--history is empty");
    }
    const auto ckpt = load_required_checkpoint(a.checkpoint);
    const auto m = model::restore(ckpt);
    const auto vocab = ckpt.vocabulary();
    const auto kind = m->config().detector_kind;
    if (kind != DetectorKind::approximator && kind != DetectorKind::generator) {
      throw ConfigError("checkpoint has detector_kind " + model::to_string(kind) +
                        "; persona prediction needs an approximator or generator checkpoint");
    }
    const auto responder = corpus::other(history.back().speaker);
    const auto in = model::prepare_input(vocab, m->config(), history, responder, std::nullopt, std::nullopt);
    for (const auto& r : read_personas(*m, vocab, in.history, corpus::PersonaSchema::default_schema())) {
      const std::string who = model::to_string(r.target);
      if (r.text) {
        s.out << who << ": " << *r.text << "\n";
      } else {
        s.out << who << ": the approximator has no text decoder; showing its embedding\n";
      }
      if (a.embedding || !r.text) {
        s.out << who << " embedding: " << format_vector(r.embedding) << "\n";
      }
    }
    return kOk;
  });
}

// ---- transfer ----

struct TransferArgs {
  fs::path from;
  fs::path corpus;
  fs::path out;
  std::optional<fs::path> config;
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
};

struct TransferData {
  corpus::Splits splits;
  // Generating personas of the test split, when the corpus can be
  // regenerated from the resolved config next to it.
  std::optional<corpus::Corpus> hidden_test;
};

inline bool has_personas(const corpus::Corpus& c) {
  return std::any_of(c.begin(), c.end(), [](const auto& ex) { return ex.self_persona || ex.their_persona; });
}

inline TransferData load_transfer_corpus(const fs::path& dir, std::ostream& err) {
  TransferData d;
  if (fs::exists(dir / "persona_free.jsonl")) {
    const auto free = corpus::load_jsonl(dir / "persona_free.jsonl");
    if (has_personas(free)) {
      err << "warning: " << (dir / "persona_free.jsonl").string() << " carries personas; they are ignored\n";
    }
    d.splits = corpus::split_by_dialogue(free);
    if (fs::exists(dir / "resolved_config.json")) {
      const auto c = load_run_config(dir / "resolved_config.json");
      const auto hidden = corpus::generate_corpus(corpus::PersonaSchema::default_schema(),
                                                  corpus::persona_free_generator(c.corpus));
      if (corpus::corpus_hash(corpus::without_personas(hidden)) == corpus::corpus_hash(corpus::without_personas(free))) {
        d.hidden_test = corpus::split_by_dialogue(hidden).test;
      }
    }
    return d;
  }
  d.splits = {load_required(dir / "train.jsonl"), load_required(dir / "valid.jsonl"),
              load_required(dir / "test.jsonl")};
  if (has_personas(d.splits.train) || has_personas(d.splits.valid) || has_personas(d.splits.test)) {
    err << "warning: corpus in " << dir.string() << " carries personas; they are ignored\n";
  }
  return d;
}

inline int transfer(const TransferArgs& a, Streams s = {}) {
  return guarded(s.err, [&] {
    RunConfig c = config_or_default(a.config);
    if (a.epochs) {
      c.transfer.epochs = *a.epochs;
    }
    if (a.seed) {
      c.transfer.seed = *a.seed;
    }
    validate(c);
    const auto source = load_required_checkpoint(a.from);
    const auto kind = source.config.detector_kind;
    if (kind != DetectorKind::approximator && kind != DetectorKind::generator) {
      throw ConfigError("transfer needs an approximator or generator checkpoint, got detector_kind " +
                        model::to_string(kind));
    }
    if (!fs::exists(a.corpus)) {
      throw PrerequisiteError("missing corpus directory " + a.corpus.string());
    }
    const auto data = load_transfer_corpus(a.corpus, s.err);
    auto plan = transfer_plan(c);
    plan.out_dir = a.out;
    plan.on_epoch = [&](const training::EpochLog& e) { s.err << describe(e) << "\n"; };
    write_resolved_config(c, a.out);
    const auto result = training::transfer_finetune(source, data.splits.train, data.splits.valid, plan);

    // Cons needs personas; the hidden ones are attached for scoring only.
    const auto test = data.hidden_test ? *data.hidden_test : corpus::without_personas(data.splits.test);
    eval::EvalOptions options;
    options.k = c.eval.k;
    const auto reports = eval::run_eval_suite({eval::named_model("transfer", result.best)}, test,
                                              {eval::Split::full}, c.eval.seed, options);
    std::ofstream(a.out / "report.json") << eval::to_json(reports).dump(2) << "\n";
    s.out << eval::format_table(reports);
    return kOk;
  });
}

// ---- chat ----

struct ChatArgs {
  fs::path checkpoint;
  std::optional<std::string> persona;
};

inline int chat(const ChatArgs& a, std::istream& in, Streams s = {}) {
  return guarded(s.err, [&] {
    const auto ckpt = load_required_checkpoint(a.checkpoint);
    std::optional<corpus::PersonaProfile> persona;
    if (a.persona) {
      corpus::PersonaProfile p;
      for (const auto& sentence : eval::persona_sentences(normalize_text(*a.persona))) {
        p.sentences.push_back(sentence);
      }
      persona = p;
    }
    ChatSession session(model::restore(ckpt), ckpt.vocabulary(), persona);
    s.out << "chatting with " << a.checkpoint.string() << " (you are SPK_A). commands: :quit :reset :persona\n";
    for (std::string line; s.out << "> " << std::flush, std::getline(in, line);) {
      const auto cmd = normalize_text(line);
      if (line == ":quit") {
        return kOk;
      }
      if (line == ":reset") {
        session.reset();
        s.out << "history cleared\n";
        continue;
      }
      if (line == ":persona") {
        s.out << session.persona_detail();
        continue;
      }
      if (cmd.empty()) {
        continue;
      }
      s.out << "SPK_B: " << session.reply(line) << "\n" << session.persona_summary();
    }
    s.out << "\n";
    return kOk;
  });
}

}  // namespace persona::cli
