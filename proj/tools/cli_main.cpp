#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "schanger/analysis.hpp"
#include "schanger/data_io.hpp"
#include "schanger/errors.hpp"
#include "schanger/evaluation.hpp"
#include "schanger/networks.hpp"
#include "schanger/scn.hpp"
#include "schanger/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace schanger;

namespace {

using KV = std::vector<std::pair<std::string, std::string>>;

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(10) << v;
  return os.str();
}

// The environment override applies to the output directory only.
std::string resolve_out(const std::string& flag_value) {
  const char* env = std::getenv("SCHANGER_OUT");
  if (env != nullptr && *env != '\0') return std::string(env);
  return flag_value;
}

void echo_config(const std::string& cmd, const std::string& out_dir,
                 const KV& kv) {
  fs::create_directories(out_dir);
  const std::string path = out_dir + "/config_resolved.txt";
  std::ofstream file(path);
  if (!file) throw DataError("cannot write " + path);
  std::cout << "resolved config (" << cmd << "):\n";
  file << "command=" << cmd << "\n";
  for (const auto& [k, v] : kv) {
    std::cout << "  " << k << "=" << v << "\n";
    file << k << "=" << v << "\n";
  }
}

void write_loss_csv(const std::string& path,
                    const std::vector<EpochStat>& history) {
  std::ofstream file(path);
  if (!file) throw DataError("cannot write " + path);
  file << "epoch,mean_loss,lr\n";
  file << std::setprecision(9);
  for (const auto& e : history) {
    file << e.epoch << "," << e.mean_loss << "," << e.last_lr << "\n";
  }
  std::cout << "wrote " << path << "\n";
}

// Saves the final weights, then the EMA shadow, and leaves the live
// model holding the final weights.
void save_with_ema(BuiltModel& model, const TrainResult& result,
                   const std::string& final_path,
                   const std::string& ema_path) {
  save_checkpoint(model.store, final_path);
  std::cout << "wrote " << final_path << "\n";
  ema_write_to(result.ema, model.store);
  save_checkpoint(model.store, ema_path);
  std::cout << "wrote " << ema_path << "\n";
  load_checkpoint(model.store, final_path);
}

struct FitOptions {
  std::string data;
  std::string split = "train";
  int epochs = 10;
  int batch = 8;
  double lr = 5e-4;
  double wd = 2e-4;
  int warmup = 1;
  double ema = 0.9998;
  int crop = 0;
  double fraction = 1.0;
  double flip_p = 0.5;
  double geometric_p = 0.3;
  double photometric_p = 0.5;
  double swap_p = 0.5;
};

void add_fit_options(CLI::App* cmd, FitOptions& o) {
  cmd->add_option("--data", o.data, "Dataset root directory")->required();
  cmd->add_option("--split", o.split, "Dataset split name")
      ->capture_default_str();
  cmd->add_option("--epochs", o.epochs, "Full passes over the data")
      ->capture_default_str();
  cmd->add_option("--batch", o.batch, "Samples per step")
      ->capture_default_str();
  cmd->add_option("--lr", o.lr, "Base learning rate")->capture_default_str();
  cmd->add_option("--weight-decay", o.wd, "Decoupled weight decay")
      ->capture_default_str();
  cmd->add_option("--warmup-epochs", o.warmup, "Linear warmup length")
      ->capture_default_str();
  cmd->add_option("--ema", o.ema, "EMA momentum")->capture_default_str();
  cmd->add_option("--crop", o.crop, "Random crop size, 0 disables")
      ->capture_default_str();
  cmd->add_option("--fraction", o.fraction,
                  "Training fraction for few-shot runs")
      ->capture_default_str();
  cmd->add_option("--flip-p", o.flip_p, "Flip probability")
      ->capture_default_str();
  cmd->add_option("--geometric-p", o.geometric_p,
                  "Rotate/translate/scale probability")
      ->capture_default_str();
  cmd->add_option("--photometric-p", o.photometric_p,
                  "Photometric jitter probability")
      ->capture_default_str();
  cmd->add_option("--swap-p", o.swap_p, "Temporal swap probability")
      ->capture_default_str();
}

KV fit_kv(const FitOptions& o) {
  return {{"data", o.data},
          {"split", o.split},
          {"epochs", std::to_string(o.epochs)},
          {"batch", std::to_string(o.batch)},
          {"lr", fmt(o.lr)},
          {"weight_decay", fmt(o.wd)},
          {"warmup_epochs", std::to_string(o.warmup)},
          {"ema", fmt(o.ema)},
          {"crop", std::to_string(o.crop)},
          {"fraction", fmt(o.fraction)},
          {"flip_p", fmt(o.flip_p)},
          {"geometric_p", fmt(o.geometric_p)},
          {"photometric_p", fmt(o.photometric_p)},
          {"swap_p", fmt(o.swap_p)}};
}

TrainConfig to_train_config(const FitOptions& o, uint64_t seed) {
  TrainConfig tc;
  tc.epochs = o.epochs;
  tc.batch_size = o.batch;
  tc.lr = o.lr;
  tc.weight_decay = o.wd;
  tc.warmup_epochs = o.warmup;
  tc.ema_momentum = static_cast<float>(o.ema);
  tc.seed = seed;
  tc.augment.crop = o.crop;
  tc.augment.flip_p = static_cast<float>(o.flip_p);
  tc.augment.geometric_p = static_cast<float>(o.geometric_p);
  tc.augment.photometric_p = static_cast<float>(o.photometric_p);
  tc.augment.temporal_swap_p = static_cast<float>(o.swap_p);
  tc.on_epoch = [total = o.epochs](const EpochStat& e) {
    std::cout << "epoch " << (e.epoch + 1) << "/" << total << " mean_loss "
              << std::setprecision(6) << e.mean_loss << " lr "
              << std::setprecision(4) << e.last_lr << "\n";
  };
  return tc;
}

// Builds the architecture recorded in a checkpoint and loads it.
BuiltModel load_model(const std::string& ckpt_path) {
  StoreMeta meta = peek_checkpoint_meta(ckpt_path);
  VariantConfig variant = variant_by_name(meta.variant);
  BuiltModel model = meta.arch == "spnet" ? build_spnet(variant, meta.seed)
                                          : build_schanger(variant, meta.seed);
  load_checkpoint(model.store, ckpt_path);
  return model;
}

void check_variant_flag(const CLI::App* cmd, const std::string& flag_value,
                        const std::string& ckpt_value) {
  if (cmd->count("--variant") > 0 && flag_value != ckpt_value) {
    throw ConfigError("variant mismatch: --variant " + flag_value +
                      " but checkpoint holds " + ckpt_value);
  }
}

json metrics_json(const EvalResult& r) {
  json j;
  j["samples"] = r.samples;
  j["tp"] = r.confusion.tp;
  j["fp"] = r.confusion.fp;
  j["fn"] = r.confusion.fn;
  j["tn"] = r.confusion.tn;
  j["precision"] = r.metrics.precision;
  j["recall"] = r.metrics.recall;
  j["f1"] = r.metrics.f1;
  j["iou"] = r.metrics.iou;
  j["accuracy"] = r.metrics.accuracy;
  j["degenerate"] = r.metrics.degenerate;
  return j;
}

void print_metrics(const EvalResult& r) {
  std::cout << std::fixed << std::setprecision(4);
  std::cout << "samples:   " << r.samples << "\n"
            << "precision: " << r.metrics.precision << "\n"
            << "recall:    " << r.metrics.recall << "\n"
            << "f1:        " << r.metrics.f1 << "\n"
            << "iou:       " << r.metrics.iou << "\n"
            << "accuracy:  " << r.metrics.accuracy << "\n";
  std::cout.unsetf(std::ios::fixed);
  std::cout << std::setprecision(6);
}

void write_text(const std::string& path, const std::string& body) {
  std::ofstream file(path);
  if (!file) throw DataError("cannot write " + path);
  file << body;
  std::cout << "wrote " << path << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Change-detection model toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "0.1.0");

  // synth ----------------------------------------------------------
  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  uint64_t synth_seed = 0;
  std::string synth_out = "out/synth";
  int synth_count = 200, synth_val = 50, synth_size = 64;
  double synth_density = 0.10;
  synth->set_config("--config", "", "Key=value option file");
  synth->add_option("--seed", synth_seed, "Master random seed")
      ->capture_default_str();
  synth->add_option("--out", synth_out, "Dataset root to create")
      ->capture_default_str();
  synth->add_option("--count", synth_count, "Training pairs")
      ->capture_default_str();
  synth->add_option("--val-count", synth_val, "Held-out pairs, 0 skips")
      ->capture_default_str();
  synth->add_option("--size", synth_size, "Raster side, multiple of 16")
      ->capture_default_str();
  synth->add_option("--density", synth_density, "Mean change fraction")
      ->capture_default_str();
  synth->callback([&] {
    const std::string out_dir = resolve_out(synth_out);
    echo_config("synth", out_dir,
                {{"seed", std::to_string(synth_seed)},
                 {"out", out_dir},
                 {"count", std::to_string(synth_count)},
                 {"val_count", std::to_string(synth_val)},
                 {"size", std::to_string(synth_size)},
                 {"density", fmt(synth_density)}});
    SynthConfig sc;
    sc.count = synth_count;
    sc.size = synth_size;
    sc.change_density = synth_density;
    sc.seed = synth_seed;
    synth_generate(out_dir, "train", sc);
    std::cout << "wrote " << out_dir << "/train (" << sc.count << " pairs)\n";
    if (synth_val > 0) {
      SynthConfig vc = sc;
      vc.count = synth_val;
      vc.seed = synth_seed + 1;
      synth_generate(out_dir, "val", vc);
      std::cout << "wrote " << out_dir << "/val (" << vc.count << " pairs)\n";
    }
  });

  // pretrain -------------------------------------------------------
  auto* pretrain =
      app.add_subcommand("pretrain", "Train the single-temporal network");
  uint64_t pre_seed = 0;
  std::string pre_variant = "small", pre_out = "out/pretrain";
  FitOptions pre_fit;
  pre_fit.epochs = 30;
  pretrain->set_config("--config", "", "Key=value option file");
  pretrain->add_option("--seed", pre_seed, "Master random seed")
      ->capture_default_str();
  pretrain->add_option("--variant", pre_variant, "Model size")
      ->check(CLI::IsMember({"small", "base"}))
      ->capture_default_str();
  pretrain->add_option("--out", pre_out, "Output directory")
      ->capture_default_str();
  add_fit_options(pretrain, pre_fit);
  pretrain->callback([&] {
    const std::string out_dir = resolve_out(pre_out);
    KV kv = {{"seed", std::to_string(pre_seed)},
             {"variant", pre_variant},
             {"out", out_dir}};
    for (auto& p : fit_kv(pre_fit)) kv.push_back(p);
    echo_config("pretrain", out_dir, kv);
    Dataset ds = load_dataset(pre_fit.data, pre_fit.split);
    if (pre_fit.fraction < 1.0) {
      ds.samples = subsample(ds.samples, pre_fit.fraction, pre_seed);
    }
    std::vector<TrainSample> samples = load_single_temporal(ds);
    std::cout << "training samples: " << samples.size() << "\n";
    BuiltModel model = build_spnet(variant_by_name(pre_variant), pre_seed);
    TrainResult r = train_model(model, samples, to_train_config(pre_fit, pre_seed));
    write_loss_csv(out_dir + "/pretrain_loss.csv", r.history);
    save_with_ema(model, r, out_dir + "/spnet.ckpt",
                  out_dir + "/spnet_ema.ckpt");
  });

  // inflate --------------------------------------------------------
  auto* inflate_cmd = app.add_subcommand(
      "inflate", "Inflate a single-temporal checkpoint into the Siamese model");
  uint64_t inf_seed = 0;
  std::string inf_variant = "small", inf_out = "out/inflate", inf_ckpt;
  inflate_cmd->set_config("--config", "", "Key=value option file");
  inflate_cmd->add_option("--seed", inf_seed, "Seed for the new tensors")
      ->capture_default_str();
  inflate_cmd->add_option("--variant", inf_variant, "Cross-check model size")
      ->check(CLI::IsMember({"small", "base"}))
      ->capture_default_str();
  inflate_cmd->add_option("--out", inf_out, "Output directory")
      ->capture_default_str();
  inflate_cmd->add_option("--checkpoint", inf_ckpt, "Source checkpoint")
      ->required();
  inflate_cmd->callback([&] {
    const std::string out_dir = resolve_out(inf_out);
    echo_config("inflate", out_dir,
                {{"seed", std::to_string(inf_seed)},
                 {"variant", inf_variant},
                 {"out", out_dir},
                 {"checkpoint", inf_ckpt}});
    StoreMeta meta = peek_checkpoint_meta(inf_ckpt);
    if (meta.arch != "spnet") {
      throw ConfigError("inflate expects a single-temporal checkpoint, got " +
                        meta.arch);
    }
    check_variant_flag(inflate_cmd, inf_variant, meta.variant);
    BuiltModel source = load_model(inf_ckpt);
    InflationResult r = inflate(source, inf_seed);
    const std::string table = r.report.table();
    std::cout << table;
    std::cout << std::setprecision(4) << "new fraction: "
              << 100.0 * r.report.new_fraction() << "%\n";
    write_text(out_dir + "/inflation_report.txt", table);
    save_checkpoint(r.model.store, out_dir + "/schanger_inflated.ckpt");
    std::cout << "wrote " << out_dir << "/schanger_inflated.ckpt\n";
  });

  // train ----------------------------------------------------------
  auto* train_cmd =
      app.add_subcommand("train", "Fine-tune the Siamese change model");
  uint64_t train_seed = 0;
  std::string train_variant = "small", train_out = "out/train";
  std::string train_init, train_freeze = "full";
  FitOptions train_fit;
  train_fit.epochs = 25;
  train_cmd->set_config("--config", "", "Key=value option file");
  train_cmd->add_option("--seed", train_seed, "Master random seed")
      ->capture_default_str();
  train_cmd->add_option("--variant", train_variant, "Model size")
      ->check(CLI::IsMember({"small", "base"}))
      ->capture_default_str();
  train_cmd->add_option("--out", train_out, "Output directory")
      ->capture_default_str();
  train_cmd->add_option("--init", train_init,
                        "Starting checkpoint; random init when omitted");
  train_cmd
      ->add_option("--freeze", train_freeze,
                   "full trains everything, new_only only the fusion tensors")
      ->check(CLI::IsMember({"full", "new_only"}));
  add_fit_options(train_cmd, train_fit);
  train_cmd->callback([&] {
    const std::string out_dir = resolve_out(train_out);
    KV kv = {{"seed", std::to_string(train_seed)},
             {"variant", train_variant},
             {"out", out_dir},
             {"init", train_init.empty() ? "(random)" : train_init},
             {"freeze", train_freeze}};
    for (auto& p : fit_kv(train_fit)) kv.push_back(p);
    echo_config("train", out_dir, kv);
    BuiltModel model;
    if (!train_init.empty()) {
      StoreMeta meta = peek_checkpoint_meta(train_init);
      if (meta.arch != "schanger") {
        throw ConfigError(
            "train expects a Siamese checkpoint; run inflate first on " +
            meta.arch);
      }
      check_variant_flag(train_cmd, train_variant, meta.variant);
      model = load_model(train_init);
    } else {
      model = build_schanger(variant_by_name(train_variant), train_seed);
    }
    finetune_mode(model.store, train_freeze);
    Dataset ds = load_dataset(train_fit.data, train_fit.split);
    if (train_fit.fraction < 1.0) {
      ds.samples = subsample(ds.samples, train_fit.fraction, train_seed);
    }
    std::vector<TrainSample> samples = load_pairs(ds);
    std::cout << "training samples: " << samples.size() << "\n";
    TrainResult r =
        train_model(model, samples, to_train_config(train_fit, train_seed));
    write_loss_csv(out_dir + "/train_loss.csv", r.history);
    save_with_ema(model, r, out_dir + "/schanger.ckpt",
                  out_dir + "/schanger_ema.ckpt");
  });

  // eval -----------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  uint64_t eval_seed = 0;
  std::string eval_out = "out/eval", eval_ckpt, eval_data,
      eval_split = "val";
  int eval_tile = 0;
  bool eval_dump = false, eval_composites = false;
  eval_cmd->set_config("--config", "", "Key=value option file");
  eval_cmd->add_option("--seed", eval_seed, "Unused; kept for uniformity")
      ->capture_default_str();
  eval_cmd->add_option("--out", eval_out, "Output directory")
      ->capture_default_str();
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Checkpoint to evaluate")
      ->required();
  eval_cmd->add_option("--data", eval_data, "Dataset root")->required();
  eval_cmd->add_option("--split", eval_split, "Dataset split")
      ->capture_default_str();
  eval_cmd->add_option("--tile", eval_tile, "Window size, 0 = whole raster")
      ->capture_default_str();
  eval_cmd->add_flag("--dump", eval_dump, "Write prediction masks");
  eval_cmd->add_flag("--composites", eval_composites,
                     "Write agreement composites with --dump");
  eval_cmd->callback([&] {
    const std::string out_dir = resolve_out(eval_out);
    echo_config("eval", out_dir,
                {{"out", out_dir},
                 {"checkpoint", eval_ckpt},
                 {"data", eval_data},
                 {"split", eval_split},
                 {"tile", std::to_string(eval_tile)},
                 {"dump", eval_dump ? "1" : "0"},
                 {"composites", eval_composites ? "1" : "0"}});
    BuiltModel model = load_model(eval_ckpt);
    Dataset ds = load_dataset(eval_data, eval_split);
    std::vector<TrainSample> samples = model.graph.arch == "spnet"
                                           ? load_single_temporal(ds)
                                           : load_pairs(ds);
    EvalConfig ec;
    ec.tile = eval_tile;
    if (eval_dump) {
      ec.dump_dir = out_dir + "/predictions";
      ec.composites = eval_composites;
    }
    EvalResult r = evaluate(model, samples, ec);
    print_metrics(r);
    std::ofstream file(out_dir + "/metrics.json");
    if (!file) throw DataError("cannot write " + out_dir + "/metrics.json");
    file << metrics_json(r).dump(2) << "\n";
    std::cout << "wrote " << out_dir << "/metrics.json\n";
  });

  // predict --------------------------------------------------------
  auto* predict_cmd =
      app.add_subcommand("predict", "Run one raster (pair) through a model");
  std::string pred_out = "out/predict", pred_ckpt, pred_a, pred_b, pred_label;
  int pred_tile = 0;
  predict_cmd->set_config("--config", "", "Key=value option file");
  predict_cmd->add_option("--out", pred_out, "Output directory")
      ->capture_default_str();
  predict_cmd->add_option("--checkpoint", pred_ckpt, "Checkpoint to run")
      ->required();
  predict_cmd->add_option("--a", pred_a, "First image")->required();
  predict_cmd->add_option("--b", pred_b, "Second image (Siamese models)");
  predict_cmd->add_option("--label", pred_label,
                          "Optional reference mask for a composite");
  predict_cmd->add_option("--tile", pred_tile, "Window size, 0 = whole raster")
      ->capture_default_str();
  predict_cmd->callback([&] {
    const std::string out_dir = resolve_out(pred_out);
    echo_config("predict", out_dir,
                {{"out", out_dir},
                 {"checkpoint", pred_ckpt},
                 {"a", pred_a},
                 {"b", pred_b.empty() ? "(none)" : pred_b},
                 {"label", pred_label.empty() ? "(none)" : pred_label},
                 {"tile", std::to_string(pred_tile)}});
    BuiltModel model = load_model(pred_ckpt);
    const bool siamese = model.graph.arch == "schanger";
    if (siamese && pred_b.empty()) {
      throw ConfigError("a Siamese checkpoint needs --b");
    }
    if (!siamese && !pred_b.empty()) {
      throw ConfigError("a single-temporal checkpoint takes only --a");
    }
    TrainSample sample;
    sample.id = fs::path(pred_a).stem().string();
    sample.a = image_to_tensor(read_png(pred_a));
    if (siamese) sample.b = image_to_tensor(read_png(pred_b));
    Tensor logits = predict_logits(model, sample, pred_tile);
    Tensor pred = binarize_logits(logits, 0.0f);
    const std::string mask_path = out_dir + "/" + sample.id + "_pred.png";
    write_prediction_mask(mask_path, pred);
    std::cout << "wrote " << mask_path << "\n";
    if (!pred_label.empty()) {
      Tensor label = mask_to_tensor(read_png(pred_label));
      Confusion c = confusion_from(pred, label);
      EvalResult r;
      r.confusion = c;
      r.metrics = metrics_from(c);
      r.samples = 1;
      print_metrics(r);
      const std::string comp_path =
          out_dir + "/" + sample.id + "_composite.png";
      write_composite(comp_path, pred, label);
      std::cout << "wrote " << comp_path << "\n";
    }
  });

  // analyze --------------------------------------------------------
  auto* analyze_cmd =
      app.add_subcommand("analyze", "Parameter and FLOPs ledger");
  std::string ana_variant = "small", ana_out = "out/analyze",
      ana_arch = "schanger";
  int ana_size = 256;
  analyze_cmd->set_config("--config", "", "Key=value option file");
  analyze_cmd->add_option("--variant", ana_variant, "Model size")
      ->check(CLI::IsMember({"small", "base"}))
      ->capture_default_str();
  analyze_cmd->add_option("--out", ana_out, "Output directory")
      ->capture_default_str();
  analyze_cmd->add_option("--arch", ana_arch, "Architecture to account")
      ->check(CLI::IsMember({"schanger", "spnet"}))
      ->capture_default_str();
  analyze_cmd->add_option("--input-size", ana_size, "Raster side")
      ->capture_default_str();
  analyze_cmd->callback([&] {
    const std::string out_dir = resolve_out(ana_out);
    echo_config("analyze", out_dir,
                {{"variant", ana_variant},
                 {"out", out_dir},
                 {"arch", ana_arch},
                 {"input_size", std::to_string(ana_size)}});
    VariantConfig variant = variant_by_name(ana_variant);
    BuiltModel model = ana_arch == "spnet" ? build_spnet(variant, 0)
                                           : build_schanger(variant, 0);
    const std::string table = emit_table(model.graph, ana_size, ana_size);
    std::cout << table;
    write_text(out_dir + "/analysis.txt", table);
    AnalysisReport rep = analyze_graph(model.graph, ana_size, ana_size);
    json j;
    j["arch"] = ana_arch;
    j["variant"] = ana_variant;
    j["input_size"] = ana_size;
    j["params"] = rep.params;
    j["macs"] = rep.macs;
    j["flops_2x"] = rep.flops_primary;
    j["flops_1x"] = rep.flops_alternate;
    if (rep.has_reference) {
      PaperRef ref = paper_ref(ana_variant);
      j["reference"]["params_m"] = ref.params_m;
      j["reference"]["flops_g"] = ref.flops_g;
      j["params_err"] = rep.params_err;
      j["flops_err_2x"] = rep.flops_err_primary;
      j["flops_err_1x"] = rep.flops_err_alternate;
      j["params_ok"] = rep.params_ok;
      j["flops_ok"] = rep.flops_ok;
    }
    std::ofstream file(out_dir + "/analysis.json");
    if (!file) throw DataError("cannot write " + out_dir + "/analysis.json");
    file << j.dump(2) << "\n";
    std::cout << "wrote " << out_dir << "/analysis.json\n";
    reconcile_or_throw(model.graph, ana_size, ana_size);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.exit_code();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
