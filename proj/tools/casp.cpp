// casp: command-line front end for the compression toolkit.

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "casp/attention_analysis.hpp"
#include "casp/bit_alloc.hpp"
#include "casp/error.hpp"
#include "casp/lowrank.hpp"
#include "casp/model_store.hpp"
#include "casp/pipeline.hpp"
#include "casp/quantizer.hpp"
#include "casp/report.hpp"
#include "casp/toy_transformer.hpp"

namespace {

using namespace casp;

template <typename T>
std::vector<T> parse_list(const std::string& text) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    std::istringstream is(item);
    T v;
    if (!(is >> v) || !is.eof()) throw Error("cannot parse list item '" + item + "'");
    out.push_back(v);
  }
  return out;
}

void emit(const std::string& text, const std::string& path) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write report " + path);
  out << text;
}

CalibrationSet heldout_for(const ModelCheckpoint& model, const std::string& path, std::uint32_t count,
                           double vision_ratio, std::uint64_t seed) {
  if (!path.empty()) return load_calibration(path);
  SyntheticCorpusOptions gen;
  gen.count = count;
  gen.seq_len = model.config.max_seq_len;
  gen.vocab_size = model.config.vocab_size;
  gen.vision_ratio = vision_ratio;
  // Disjoint from any calibration seed the user is likely to pick.
  gen.seed = seed + 0x100000001b3ull;
  return generate_synthetic_corpus(gen);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"casp: low-rank Q/K factorization and mixed-precision quantization of a toy transformer"};
  app.require_subcommand(1);
  std::string current = "casp";

  // init
  auto* init = app.add_subcommand("init", "Create and train a toy transformer checkpoint");
  std::string init_out;
  std::uint64_t init_seed = 1;
  ToyModelOptions toy;
  init->add_option("--out", init_out, "Output .caspkpt")->required();
  init->add_option("--seed", init_seed, "Seed");
  init->add_option("--d", toy.config.d, "Hidden dim");
  init->add_option("--layers", toy.config.n_layers, "Number of blocks");
  init->add_option("--heads", toy.config.n_heads, "Attention heads");
  init->add_option("--vocab", toy.config.vocab_size, "Vocabulary size");
  init->add_option("--seq-len", toy.config.max_seq_len, "Maximum sequence length");
  init->add_option("--d-ff", toy.config.d_ff, "MLP hidden width");
  init->add_option("--train-steps", toy.train.steps, "Adam steps (0 keeps the random init)");
  init->add_option("--train-count", toy.corpus_count, "Training sequences");
  init->add_option("--batch", toy.train.batch, "Sequences per step");
  init->add_option("--lr", toy.train.learning_rate, "Learning rate");

  // gen-calib
  auto* gen_cmd = app.add_subcommand("gen-calib", "Write a synthetic .casptok calibration file");
  std::string gen_out;
  SyntheticCorpusOptions gen;
  gen_cmd->add_option("--out", gen_out, "Output .casptok")->required();
  gen_cmd->add_option("--count", gen.count, "Sequences");
  gen_cmd->add_option("--seq-len", gen.seq_len, "Tokens per sequence");
  gen_cmd->add_option("--vocab", gen.vocab_size, "Vocabulary size");
  gen_cmd->add_option("--vision-ratio", gen.vision_ratio, "Fraction of each sequence in the vision block");
  gen_cmd->add_option("--zipf", gen.zipf_exponent, "Zipf exponent of text tokens");
  gen_cmd->add_option("--seed", gen.seed, "Seed");

  // compress
  auto* compress = app.add_subcommand("compress", "Run the full low-rank + allocation + quantization recipe");
  std::string c_model, c_calib, c_out, c_report, c_heldout, c_scheme = "rtn", c_allowed = "2,3",
                                                          c_alloc = "optimal";
  std::uint64_t c_seed = 0;
  std::optional<double> c_mu;
  std::uint32_t c_heldout_count = 32;
  double c_heldout_ratio = 0.0;
  bool c_no_lowrank = false;
  CompressionRecipe recipe;
  compress->add_option("--model", c_model, "Input .caspkpt")->required();
  compress->add_option("--calib", c_calib, "Calibration .casptok")->required();
  compress->add_option("--out", c_out, "Output .caspkpt")->required();
  compress->add_option("--seed", c_seed, "Seed for every stochastic step")->required();
  compress->add_option("--rank-keep", recipe.rank_keep, "Fraction of W_q/W_k parameters kept");
  compress->add_flag("--no-lowrank", c_no_lowrank, "Skip the Q/K low-rank stage");
  compress->add_option("--scheme", c_scheme, "rtn | greedy | vq | none");
  compress->add_option("--avg-bits", recipe.b_avg, "Average bits per original weight");
  compress->add_option("--mu", c_mu, "Entropic regularization weight");
  compress->add_option("--allowed", c_allowed, "Allowed integer widths, comma separated");
  compress->add_option("--group", recipe.group_size, "Group size (rtn/greedy) or vector dim (vq)");
  compress->add_option("--eta", recipe.eta, "Attention activity threshold (default 0.01/N)");
  compress->add_option("--allocation", c_alloc, "optimal | random | uniform");
  bool c_unmasked = false;
  compress->add_flag("--unmasked", c_unmasked, "Analyze full softmax maps instead of causal ones");
  compress->add_option("--heldout", c_heldout, "Held-out .casptok (default: synthetic, disjoint seed)");
  compress->add_option("--heldout-count", c_heldout_count, "Synthetic held-out sequences");
  compress->add_option("--heldout-vision-ratio", c_heldout_ratio, "Synthetic held-out vision ratio");
  compress->add_option("--report", c_report, "Line-delimited JSON report path (default stdout)");

  // analyze
  auto* analyze = app.add_subcommand("analyze", "Attention sparsity and compression error per layer");
  std::string a_model, a_compressed, a_calib, a_report, a_maps;
  double a_eta = 0.0;
  analyze->add_option("--model", a_model, "Original .caspkpt")->required();
  analyze->add_option("--compressed", a_compressed, "Compressed .caspkpt")->required();
  analyze->add_option("--calib", a_calib, "Calibration .casptok")->required();
  analyze->add_option("--eta", a_eta, "Activity threshold (default 0.01/N)");
  analyze->add_option("--report", a_report, "Report path (default stdout)");
  analyze->add_option("--maps", a_maps, "Write S and S' of the first sequence per layer as JSONL");
  bool a_unmasked = false;
  analyze->add_flag("--unmasked", a_unmasked, "Full softmax maps instead of causal ones");

  // lowrank
  auto* lowrank = app.add_subcommand("lowrank", "Whitened low-rank factorization of W_q and W_k");
  std::string l_model, l_calib, l_out;
  double l_keep = 0.25;
  lowrank->add_option("--model", l_model, "Input .caspkpt")->required();
  lowrank->add_option("--calib", l_calib, "Calibration .casptok")->required();
  lowrank->add_option("--out", l_out, "Output .caspkpt")->required();
  lowrank->add_option("--rank-keep", l_keep, "Fraction of parameters kept");

  // quantize
  auto* quantize = app.add_subcommand("quantize", "Quantize every block tensor at a fixed width");
  std::string q_model, q_calib, q_out, q_scheme = "rtn";
  int q_bits = 2, q_group = 128;
  std::uint64_t q_seed = 0;
  quantize->add_option("--model", q_model, "Input .caspkpt")->required();
  quantize->add_option("--out", q_out, "Output .caspkpt")->required();
  quantize->add_option("--scheme", q_scheme, "rtn | greedy | vq");
  quantize->add_option("--bits", q_bits, "Bits per weight");
  quantize->add_option("--group", q_group, "Group size (rtn/greedy) or vector dim (vq)");
  quantize->add_option("--calib", q_calib, "Calibration .casptok (greedy only)");
  quantize->add_option("--seed", q_seed, "Seed (vq)");

  // allocate
  auto* allocate = app.add_subcommand("allocate", "Per-layer bit allocation table");
  std::string al_model, al_calib, al_allowed = "2,3", al_report;
  double al_bits = 2.0;
  std::optional<double> al_mu;
  allocate->add_option("--model", al_model, ".caspkpt (p_l taken from its representations)")->required();
  allocate->add_option("--calib", al_calib, "Calibration .casptok")->required();
  allocate->add_option("--avg-bits", al_bits, "Average bits per original weight");
  allocate->add_option("--mu", al_mu, "Entropic regularization weight");
  allocate->add_option("--allowed", al_allowed, "Allowed integer widths");
  allocate->add_option("--report", al_report, "Also write the plan as JSONL");

  // eval
  auto* eval = app.add_subcommand("eval", "Held-out perplexity");
  std::string e_model, e_heldout;
  std::uint32_t e_count = 32;
  double e_ratio = 0.0;
  std::uint64_t e_seed = 0;
  eval->add_option("--model", e_model, ".caspkpt")->required();
  eval->add_option("--heldout", e_heldout, "Held-out .casptok (default: synthetic)");
  eval->add_option("--count", e_count, "Synthetic held-out sequences");
  eval->add_option("--vision-ratio", e_ratio, "Synthetic held-out vision ratio");
  eval->add_option("--seed", e_seed, "Synthetic held-out seed");

  // sweep
  auto* sweep = app.add_subcommand("sweep", "Vision-token ratio sweep at fixed rank");
  std::string s_model, s_ratios = "0,0.25,0.5,0.75", s_report;
  SweepOptions s_opts;
  sweep->add_option("--model", s_model, ".caspkpt")->required();
  sweep->add_option("--ratios", s_ratios, "Vision ratios, comma separated");
  sweep->add_option("--rank-keep", s_opts.rank_keep, "Fraction of W_q/W_k parameters kept");
  sweep->add_option("--calib-count", s_opts.calib_count, "Calibration sequences per ratio");
  sweep->add_option("--heldout-count", s_opts.heldout_count, "Held-out sequences per ratio");
  sweep->add_option("--seed", s_opts.seed, "Seed");
  sweep->add_option("--eta", s_opts.eta, "Activity threshold (default 0.01/N)");
  sweep->add_option("--report", s_report, "Report path (default stdout)");
  bool s_unmasked = false;
  sweep->add_flag("--unmasked", s_unmasked, "Full softmax maps instead of causal ones");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*init) {
      current = "init";
      toy.seed = init_seed;
      TrainReport tr;
      const ModelCheckpoint model = build_toy_model(toy, &tr);
      save_checkpoint(model, init_out);
      std::cerr << "trained: loss " << tr.initial_loss << " -> " << tr.final_loss << "\n";
    } else if (*gen_cmd) {
      current = "gen-calib";
      save_calibration(generate_synthetic_corpus(gen), gen_out);
    } else if (*compress) {
      current = "compress";
      recipe.seed = c_seed;
      recipe.mu = c_mu;
      recipe.lowrank = !c_no_lowrank;
      recipe.causal_maps = !c_unmasked;
      recipe.allowed_bits = parse_list<int>(c_allowed);
      if (c_scheme == "none") {
        recipe.scheme.reset();
      } else {
        recipe.scheme = parse_scheme(c_scheme);
      }
      if (c_alloc == "optimal") {
        recipe.allocation = AllocationMode::optimal;
      } else if (c_alloc == "random") {
        recipe.allocation = AllocationMode::random;
      } else if (c_alloc == "uniform") {
        recipe.allocation = AllocationMode::uniform;
      } else {
        throw Error("unknown allocation mode '" + c_alloc + "'");
      }
      const ModelCheckpoint model = load_checkpoint(c_model);
      const CalibrationSet calib = load_calibration(c_calib);
      const CalibrationSet heldout = heldout_for(model, c_heldout, c_heldout_count, c_heldout_ratio, c_seed);
      const CompressionResult result = compress_casp(model, calib, heldout, recipe);
      save_checkpoint(result.model, c_out);
      emit(to_jsonl(result.report, recipe), c_report);
    } else if (*analyze) {
      current = "analyze";
      const ModelCheckpoint model = load_checkpoint(a_model);
      const ModelCheckpoint compressed = load_checkpoint(a_compressed);
      const CalibrationSet calib = load_calibration(a_calib);
      const auto acts = forward_collect(model, calib);
      emit(to_jsonl(analyze_attention(model, compressed, acts, a_eta, !a_unmasked)), a_report);
      if (!a_maps.empty()) {
        std::string maps;
        const auto n = static_cast<Eigen::Index>(calib.seq_len);
        const auto dh = static_cast<Eigen::Index>(model.config.head_dim());
        for (std::size_t l = 0; l < acts.size(); ++l) {
          const Eigen::MatrixXd x = acts[l].attn_in.topRows(n);
          const Eigen::MatrixXd wq = materialize(model.layers[l].w_q).leftCols(dh);
          const Eigen::MatrixXd wk = materialize(model.layers[l].w_k).leftCols(dh);
          const Eigen::MatrixXd wq2 = materialize(compressed.layers[l].w_q).leftCols(dh);
          const Eigen::MatrixXd wk2 = materialize(compressed.layers[l].w_k).leftCols(dh);
          const auto s = attention_map<double>(x, wq, wk, dh, !a_unmasked).s;
          const auto s2 = attention_map<double>(x, wq2, wk2, dh, !a_unmasked).s;
          auto rows = [](const Eigen::MatrixXd& m) {
            std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
            for (Eigen::Index i = 0; i < m.rows(); ++i) out[static_cast<std::size_t>(i)] = {m.row(i).begin(), m.row(i).end()};
            return out;
          };
          maps += nlohmann::ordered_json{{"record", "map"}, {"layer", l}, {"head", 0}, {"s", rows(s)}, {"s_approx", rows(s2)}}.dump();
          maps += '\n';
        }
        emit(maps, a_maps);
      }
    } else if (*lowrank) {
      current = "lowrank";
      const ModelCheckpoint model = load_checkpoint(l_model);
      save_checkpoint(apply_lowrank_qk(model, load_calibration(l_calib), LowRankOptions{l_keep, 0.0}), l_out);
    } else if (*quantize) {
      current = "quantize";
      ModelCheckpoint model = load_checkpoint(q_model);
      const QuantScheme scheme = parse_scheme(q_scheme);
      std::vector<LayerActivations> acts;
      if (scheme == QuantScheme::greedy) {
        if (q_calib.empty()) throw Error("--calib is required for the greedy scheme");
        acts = forward_collect(model, load_calibration(q_calib));
      }
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        quantize_block(model.layers[l], acts.empty() ? nullptr : &acts[l], scheme, q_bits, q_group, q_seed + l);
      }
      save_checkpoint(model, q_out);
      std::cout << "avg_effective_bits " << std::setprecision(17) << average_effective_bits(model) << "\n";
    } else if (*allocate) {
      current = "allocate";
      const ModelCheckpoint model = load_checkpoint(al_model);
      const auto acts = forward_collect(model, load_calibration(al_calib));
      const LayerImportance imp = layer_importance(acts);
      Eigen::VectorXd params(static_cast<Eigen::Index>(model.layers.size()));
      for (std::size_t l = 0; l < model.layers.size(); ++l) {
        params[static_cast<Eigen::Index>(l)] = static_cast<double>(model.layers[l].param_count());
      }
      const double target =
          al_bits * static_cast<double>(original_block_params(model.config)) / params.sum();
      const double mu = al_mu.value_or(default_mu(imp.scores, params));
      const BitPlan plan = round_bits(allocate_bits(imp, params, target, mu), parse_list<int>(al_allowed));
      std::cout << "layer\ts_l\tp_l\tb_cont\tb_int\n" << std::setprecision(6);
      for (Eigen::Index l = 0; l < params.size(); ++l) {
        std::cout << l << '\t' << plan.scores[l] << '\t' << plan.params[l] << '\t' << plan.bits_cont[l] << '\t'
                  << plan.bits_int[static_cast<std::size_t>(l)] << '\n';
      }
      if (!al_report.empty()) emit(to_jsonl(plan), al_report);
    } else if (*eval) {
      current = "eval";
      const ModelCheckpoint model = load_checkpoint(e_model);
      const CalibrationSet heldout = heldout_for(model, e_heldout, e_count, e_ratio, e_seed);
      std::cout << std::setprecision(17) << evaluate_ppl(model, heldout) << "\n";
    } else if (*sweep) {
      current = "sweep";
      const ModelCheckpoint model = load_checkpoint(s_model);
      const auto ratios = parse_list<double>(s_ratios);
      s_opts.causal_maps = !s_unmasked;
      const auto rows = sweep_vision_ratio(model, ratios, s_opts);
      std::vector<double> es;
      for (const auto& r : rows) es.push_back(r.attention.e);
      const double rho = rows.size() >= 2 ? spearman(ratios, es) : 0.0;
      emit(to_jsonl(rows, rho), s_report);
    }
  } catch (const StageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: [" << current << "] " << e.what() << "\n";
    return 1;
  }
  return 0;
}
