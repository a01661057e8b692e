// websod: command line front end for the benchmark generator, the three
// training stages, evaluation and the ablation ladder.

#include <CLI11.hpp>
#include <fmt/format.h>

#include <algorithm>
#include <filesystem>
#include <iostream>

#include "websod/checkpoint.hpp"
#include "websod/image_io.hpp"
#include "websod/pipeline.hpp"
#include "websod/synthetic.hpp"

namespace fs = std::filesystem;
using namespace websod;
using namespace websod::pipeline;

namespace {

PipelineConfig config_or_default(const std::string& path) {
  return path.empty() ? PipelineConfig{} : load_config(path);
}

void print_history_summary(const StageOutcome& o, const std::string& what) {
  const auto& h = o.history.history;
  fmt::print("{}: {} steps in {:.1f}s", what, h.size(), o.seconds);
  if (!h.empty()) fmt::print(", loss {:.4f} -> {:.4f}", h.front().loss.total, h.back().loss.total);
  fmt::print("\ndigest = {}\n", o.digest);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Webly supervised object detection on a synthetic two-domain benchmark"};
  app.require_subcommand(1);

  std::string bench, config_path, out, base_ckpt, web_ckpt, pseudo, detector_ckpt, rfr_ckpt, work, image_path;
  std::string spec_path, split = "target-test", target_split = "target-train", class_name, ap = "11point";
  std::uint64_t seed = 0;
  bool force = false, no_acl = false, kv = false;
  double iou = 0.5;

  auto* gen = app.add_subcommand("gen-bench", "Generate the synthetic benchmark");
  gen->add_option("--out", out, "Output directory")->required();
  gen->add_option("--spec", spec_path, "Benchmark spec (INI, as written to benchmark.ini)");
  gen->add_option("--seed", seed, "Override the generator seed");
  gen->add_flag("--force", force, "Replace an existing output directory");

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--bench", bench, "Benchmark directory")->required();
    cmd->add_option("--config", config_path, "Pipeline config (INI)");
  };

  auto* tb = app.add_subcommand("train-base", "Stage 1: base-class detector on annotated target images");
  add_common(tb);
  tb->add_option("--split", target_split, "Annotated split to train on");
  tb->add_option("--out", out, "Output checkpoint")->required();

  auto* er = app.add_subcommand("estimate-regions", "Pseudo boxes on web images from the base detector");
  add_common(er);
  er->add_option("--base", base_ckpt, "Base detector checkpoint")->required();
  er->add_option("--out", out, "Output pseudo annotations (JSON lines)")->required();

  auto* tw = app.add_subcommand("train-web", "Stage 2: web detector from pseudo boxes");
  add_common(tw);
  tw->add_option("--base", base_ckpt, "Base detector checkpoint")->required();
  tw->add_option("--pseudo", pseudo, "Pseudo annotations")->required();
  tw->add_option("--out", out, "Output checkpoint")->required();
  tw->add_flag("--no-acl", no_acl, "Uniform RoI weights (Base WebSOD)");

  auto* tr = app.add_subcommand("train-rfr", "Stage 3: residual feature refinement block");
  add_common(tr);
  tr->add_option("--web", web_ckpt, "Web detector checkpoint")->required();
  tr->add_option("--pseudo", pseudo, "Pseudo annotations")->required();
  tr->add_option("--out", out, "Output block checkpoint")->required();

  auto* tf = app.add_subcommand("train-ft", "Fine-tuning baseline for stage 3");
  add_common(tf);
  tf->add_option("--web", web_ckpt, "Web detector checkpoint")->required();
  tf->add_option("--pseudo", pseudo, "Pseudo annotations")->required();
  tf->add_option("--out", out, "Output checkpoint")->required();

  auto* ev = app.add_subcommand("eval", "Average precision on a target split");
  add_common(ev);
  ev->add_option("--detector", detector_ckpt, "Detector checkpoint")->required();
  ev->add_option("--rfr", rfr_ckpt, "Refinement block checkpoint");
  ev->add_option("--split", split, "Split to evaluate");
  auto* iou_opt = ev->add_option("--iou", iou, "IoU threshold")->check(CLI::IsMember({0.5, 0.7}));
  auto* ap_opt = ev->add_option("--ap", ap, "11point or allpoint")->check(CLI::IsMember({"11point", "allpoint"}));
  ev->add_flag("--kv", kv, "Print key=value lines only");

  auto* ab = app.add_subcommand("ablate", "Run the full ablation ladder");
  add_common(ab);
  ab->add_option("--work", work, "Working directory for checkpoints and reports")->required();

  auto* dc = app.add_subcommand("dump-cam", "Write class activation map overlays as grayscale PNGs");
  dc->add_option("--detector", detector_ckpt, "Detector checkpoint")->required();
  dc->add_option("--image", image_path, "Input PNG")->required();
  dc->add_option("--out", out, "Output directory")->required();
  dc->add_option("--bench", bench, "Benchmark directory (for class names)");
  dc->add_option("--class", class_name, "Only this class");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto spec = spec_path.empty() ? synth::SyntheticBenchmarkSpec{} : synth::spec_from_ini(read_text_file(spec_path));
      if (seed) spec.seed = seed;
      synth::generate_synthetic_benchmark(spec, out, force);
      fmt::print("benchmark written to {}\n", out);
    } else if (*tb || *tw || *tr || *tf) {
      StageConfig s;
      s.bench_dir = bench;
      s.config = config_or_default(config_path);
      s.output_checkpoint = out;
      s.pseudo_annotations = pseudo;
      if (*tb) {
        s.stage = StageId::BaseTrain;
        s.target_split = target_split;
      } else if (*tw) {
        s.stage = StageId::WebTrain;
        s.input_checkpoint = base_ckpt;
        s.attentive = !no_acl;
      } else {
        s.stage = *tr ? StageId::Rfr : StageId::FtBaseline;
        s.input_checkpoint = web_ckpt;
      }
      print_history_summary(run_stage(s), stage_name(s.stage));
    } else if (*er) {
      const auto o = run_estimate_regions(bench, base_ckpt, config_or_default(config_path), out);
      int boxes = 0;
      for (const auto& p : o.pseudo) boxes += static_cast<int>(p.boxes.size());
      fmt::print("images = {}\nimages_with_boxes = {}\nboxes = {}\n", o.pseudo.size(), o.images_with_boxes, boxes);
      if (o.quality) fmt::print("precision = {:.4f}\nrecall = {:.4f}\n", o.quality->precision, o.quality->recall);
    } else if (*ev) {
      auto settings = config_or_default(config_path).eval;
      if (*iou_opt) settings.iou_threshold = iou;
      if (*ap_opt) settings.method = ap == "allpoint" ? eval::ApMethod::AllPoint : eval::ApMethod::ElevenPoint;
      const auto report = run_eval(bench, detector_ckpt,
                                   rfr_ckpt.empty() ? std::nullopt : std::optional<fs::path>(rfr_ckpt), settings, split);
      const auto info = load_benchmark_info(bench);
      if (!kv) std::cout << eval::format_report(report, info.vocab, info.split) << "\n";
      std::cout << eval::format_report_kv(report, info.vocab);
    } else if (*ab) {
      const auto r = run_ablation(bench, config_or_default(config_path), work);
      std::cout << r.table;
    } else if (*dc) {
      const auto params = load_detector(detector_ckpt);
      const Tensor image = read_png(image_path);
      std::vector<std::string> names;
      if (!bench.empty()) names = load_benchmark_info(bench).vocab.names();
      if (!class_name.empty() && std::find(names.begin(), names.end(), class_name) == names.end() &&
          class_name.find_first_not_of("0123456789") != std::string::npos)
        throw std::invalid_argument("unknown class '" + class_name + "'" + (bench.empty() ? " (pass --bench for names)" : ""));
      fs::create_directories(out);
      for (int c = 0; c < params.config.num_classes; ++c) {
        const std::string name = c < static_cast<int>(names.size()) ? names[static_cast<std::size_t>(c)] : std::to_string(c);
        if (!class_name.empty() && class_name != name) continue;
        const fs::path path = fs::path(out) / ("cam_" + name + ".png");
        write_png(path, cam_overlay(image, params, c));
        fmt::print("{}\n", path.string());
      }
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
