#include <CLI11.hpp>

#include "persona/cli/commands.hpp"

namespace cli = persona::cli;

int main(int argc, char** argv) {
  CLI::App app{"Persona detection dialogue models: corpus generation, training, evaluation, transfer, chat"};
  app.require_subcommand(1);

  cli::GenCorpusArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Generate train/valid/test and persona-free corpora");
  gen_cmd->add_option("--config", gen.config, "RunConfig JSON file")->required();
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();

  cli::TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train one protocol");
  train_cmd->add_option("--config", tr.config, "RunConfig JSON file (defaults when omitted)");
  train_cmd->add_option("--protocol", tr.protocol, "baseline|with_encoder|approximator|generator")->required();
  train_cmd->add_option("--persona", tr.persona, "none|self|their|both|prepend")->capture_default_str();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_option("--corpus", tr.corpus, "Corpus directory (overrides train.corpus_dir)");
  train_cmd->add_option("--from-checkpoint", tr.from_checkpoint, "with_encoder checkpoint (approximator protocol)");
  train_cmd->add_option("--seed", tr.seed, "Overrides train.seed");
  train_cmd->add_option("--epochs", tr.epochs, "Overrides train.epochs");

  cli::EvalArgs ev;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate checkpoints on a test corpus");
  eval_cmd->add_option("--checkpoints", ev.checkpoints, "Checkpoint files")->required();
  eval_cmd->add_option("--test", ev.test, "Test JSONL file")->required();
  eval_cmd->add_option("--splits", ev.splits, "Comma-separated full,first_half,second_half")->capture_default_str();
  eval_cmd->add_option("--seed", ev.seed, "Distractor sampling seed")->capture_default_str();
  eval_cmd->add_option("--k", ev.k, "Distractors per example")->capture_default_str();
  eval_cmd->add_option("--out", ev.out, "Directory for report.json (printed when omitted)");

  cli::PredictArgs pr;
  auto* predict_cmd = app.add_subcommand("predict-persona", "Infer personas from a dialogue history");
  predict_cmd->add_option("--checkpoint", pr.checkpoint, "Checkpoint file")->required();
  predict_cmd->add_option("--history", pr.history, "Utterances separated by '|', or a file with one per line")
      ->required();
  predict_cmd->add_flag("--embedding", pr.embedding, "Also print the persona embedding");

  cli::TransferArgs tf;
  auto* transfer_cmd = app.add_subcommand("transfer", "Fine-tune a detector model on a persona-free corpus");
  transfer_cmd->add_option("--from", tf.from, "Approximator or generator checkpoint")->required();
  transfer_cmd->add_option("--corpus", tf.corpus, "Persona-free corpus directory")->required();
  transfer_cmd->add_option("--out", tf.out, "Output directory")->required();
  transfer_cmd->add_option("--config", tf.config, "RunConfig JSON file (transfer section)");
  transfer_cmd->add_option("--epochs", tf.epochs, "Overrides transfer.epochs");
  transfer_cmd->add_option("--seed", tf.seed, "Overrides transfer.seed");

  cli::ChatArgs ch;
  auto* chat_cmd = app.add_subcommand("chat", "Interactive chat with live persona inference");
  chat_cmd->add_option("--checkpoint", ch.checkpoint, "Checkpoint file")->required();
  chat_cmd->add_option("--persona", ch.persona, "Model's own persona text (self/prepend checkpoints)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : cli::kUsage;
  }

  if (*gen_cmd) {
    return cli::gen_corpus(gen);
  }
  if (*train_cmd) {
    return cli::train(tr);
  }
  if (*eval_cmd) {
    return cli::evaluate(ev);
  }
  if (*predict_cmd) {
    return cli::predict_persona(pr);
  }
  if (*transfer_cmd) {
    return cli::transfer(tf);
  }
  return cli::chat(ch, std::cin);
}
