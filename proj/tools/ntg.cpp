// Command-line front end: extract, match, swap, synthesize, train, eval,
// gen-data and gradcheck.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "ntg/ntg.hpp"

namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Globals {
  std::uint64_t seed = 0;
  std::size_t threads = 0;
  std::string config;
};

struct FeatureArgs {
  std::string input;
  std::vector<std::string> refs;
  std::string weights;
  std::vector<std::size_t> plan = ntg::kDefaultChannelPlan;
  std::vector<std::size_t> levels;  // 1-based; empty = all
  std::size_t patch = 3;
  std::size_t blur = 2;
  std::string out;
};

class UsageError : public std::runtime_error {
  using std::runtime_error::runtime_error;
};

ntg::TrainConfig base_config(const Globals& g) {
  ntg::TrainConfig c;
  if (!g.config.empty()) c = ntg::load_config(g.config);
  c.seed = g.seed;
  c.corpus.seed = g.seed;
  return c;
}

std::string level_name(const char* what, std::size_t l) { return std::string(what) + ".level" + std::to_string(l + 1); }

ntg::FeatureExtractor extractor_for(const FeatureArgs& a, const Globals& g) {
  if (a.weights.empty()) return ntg::build_extractor(g.seed, a.plan.size(), a.plan);
  const ntg::NtxMap w = ntg::read_ntx1(a.weights);
  const auto plan = ntg::plan_from_weights(w);
  ntg::FeatureExtractor phi = ntg::build_extractor(0, plan.size(), plan);
  ntg::load_params(w, phi.parameters());
  return phi;
}

std::vector<std::size_t> zero_based_levels(const FeatureArgs& a, std::size_t count) {
  std::vector<std::size_t> out;
  if (a.levels.empty()) {
    for (std::size_t l = 0; l < count; ++l) out.push_back(l);
    return out;
  }
  for (std::size_t l : a.levels) {
    if (l < 1 || l > count) throw UsageError("--level " + std::to_string(l) + " outside 1.." + std::to_string(count));
    out.push_back(l - 1);
  }
  return out;
}

ntg::TextureMaps run_match(const FeatureArgs& a, const Globals& g) {
  if (a.refs.empty()) throw UsageError("at least one --ref is required");
  const ntg::FeatureExtractor phi = extractor_for(a, g);
  std::vector<ntg::Grid> refs;
  for (const auto& r : a.refs) refs.push_back(ntg::read_pgm(r));
  const ntg::RefPyramids pools = ntg::reference_pyramids(phi, refs, a.blur);
  const auto levels = zero_based_levels(a, phi.level_count());
  return ntg::match_image(phi, ntg::read_pgm(a.input), pools, levels, a.patch);
}

void add_feature_options(CLI::App* sub, FeatureArgs& a, bool with_refs) {
  sub->add_option("--input", a.input, "Input image (P5 PGM)")->required();
  if (with_refs) {
    sub->add_option("--ref", a.refs, "Reference image (P5 PGM); repeatable");
    sub->add_option("--level", a.levels, "Pyramid level to process, 1 = finest; repeatable (default: all)");
    sub->add_option("--patch", a.patch, "Patch size k")->capture_default_str();
    sub->add_option("--blur", a.blur, "Reference blur factor, 1 = none")->capture_default_str();
  }
  sub->add_option("--weights", a.weights, "NTX1 checkpoint holding the extractor (default: seeded extractor)");
  sub->add_option("--plan", a.plan, "Channels per level for the seeded extractor")->capture_default_str()->delimiter(',');
  sub->add_option("--out", a.out, "Output NTX1 file")->required();
}

std::vector<fs::path> pgm_files(const fs::path& p) {
  std::vector<fs::path> out;
  if (fs::is_directory(p)) {
    for (const auto& e : fs::directory_iterator(p))
      if (e.is_regular_file() && e.path().extension() == ".pgm") out.push_back(e.path());
    std::sort(out.begin(), out.end());
  } else {
    out.push_back(p);
  }
  return out;
}

std::string eval_csv_row(const ntg::metrics::MetricRow& r) {
  return r.id + "," + ntg::csv_number(r.ssim) + "," + ntg::csv_number(r.mse) + "," + ntg::csv_number(r.psnr) + "," +
         ntg::csv_number(r.histcorr);
}

ntg::metrics::MetricRow evaluate_files(const std::string& id, const fs::path& out, const fs::path& target) {
  return ntg::metrics::evaluate(id, ntg::metrics::to_8bit(ntg::read_pgm(out)), ntg::metrics::to_8bit(ntg::read_pgm(target)));
}

std::string summary_block(const std::vector<ntg::metrics::MetricRow>& rows) {
  std::string s = "# summary\nmetric,mean,median,q1,q3,outliers\n";
  const std::pair<const char*, double ntg::metrics::MetricRow::*> cols[] = {
      {"ssim", &ntg::metrics::MetricRow::ssim},
      {"mse", &ntg::metrics::MetricRow::mse},
      {"psnr", &ntg::metrics::MetricRow::psnr},
      {"histcorr", &ntg::metrics::MetricRow::histcorr}};
  for (const auto& [name, member] : cols) {
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.*member);
    const auto sum = ntg::metrics::summarize(v);
    std::string ids;
    for (std::size_t i : sum.outliers) ids += (ids.empty() ? "" : " ") + rows[i].id;
    s += std::string(name) + "," + ntg::csv_number(sum.mean) + "," + ntg::csv_number(sum.median) + "," +
         ntg::csv_number(sum.q1) + "," + ntg::csv_number(sum.q3) + "," + ids + "\n";
  }
  return s;
}

int run(int argc, char** argv) {
  CLI::App app{"Multi-scale neural texture transfer toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  Globals g;
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads (default: NTG_THREADS, else all cores)");
  app.add_option("--config", g.config, "Flat key = value configuration file");

  // extract
  FeatureArgs ex;
  auto* extract = app.add_subcommand("extract", "Write the feature pyramid of an image");
  add_feature_options(extract, ex, false);

  // match / swap
  FeatureArgs ma, sw;
  auto* match = app.add_subcommand("match", "Write best-match index and score maps per level");
  add_feature_options(match, ma, true);
  auto* swap = app.add_subcommand("swap", "Write swapped feature maps and weight maps per level");
  add_feature_options(swap, sw, true);

  // synthesize
  std::string sy_input, sy_weights, sy_out, sy_target, sy_mode = "full", sy_gen = "G";
  std::vector<std::string> sy_refs;
  int sy_scale = 1;
  auto* synth = app.add_subcommand("synthesize", "Translate an image with trained weights");
  synth->add_option("--input", sy_input, "Input image (P5 PGM)")->required();
  synth->add_option("--ref", sy_refs, "Reference image; repeatable, required unless --mode none");
  synth->add_option("--weights", sy_weights, "NTX1 checkpoint")->required();
  synth->add_option("--mode", sy_mode, "full | single | none")->capture_default_str();
  synth->add_option("--scale", sy_scale, "1 (translation) or 2 (super-resolution)")->capture_default_str();
  synth->add_option("--generator", sy_gen, "G (X to Y) or F (Y to X)")->capture_default_str();
  synth->add_option("--out", sy_out, "Output image (P5 PGM)")->required();
  synth->add_option("--target", sy_target, "Ground truth; prints one eval CSV row");

  // train
  std::string tr_out, tr_mode;
  std::size_t tr_epochs = 0;
  std::vector<std::size_t> tr_plan;
  auto* train = app.add_subcommand("train", "Cycle-consistent training on the toy corpus");
  train->add_option("--out", tr_out, "Output directory for checkpoints and metrics.csv")->required();
  train->add_option("--mode", tr_mode, "full | single_scale_texture | no_texture (default: full)");
  train->add_option("--epochs", tr_epochs, "Epochs (default: 100)");
  train->add_option("--plan", tr_plan, "Channels per level (default: 16,32,64)")->delimiter(',');

  // eval
  std::string ev_outputs, ev_targets, ev_out;
  auto* eval = app.add_subcommand("eval", "Metrics of output images against targets");
  eval->add_option("--outputs", ev_outputs, "Output image or directory of .pgm files")->required();
  eval->add_option("--targets", ev_targets, "Target image or directory with the same file names")->required();
  eval->add_option("--out", ev_out, "CSV file (default: standard output)");

  // gen-data
  std::string gd_out;
  std::size_t gd_size = 0, gd_train = 0, gd_val = 0;
  auto* gendata = app.add_subcommand("gen-data", "Write the toy two-domain corpus as PGM files");
  gendata->add_option("--out", gd_out, "Output directory")->required();
  gendata->add_option("--image-size", gd_size, "Image side (default: 32)");
  gendata->add_option("--train-count", gd_train, "Training images per domain (default: 64)");
  gendata->add_option("--val-count", gd_val, "Validation pairs (default: 16)");

  // gradcheck
  std::size_t gc_size = 8, gc_coords = 250;
  bool gc_corrupt = false;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every loss term");
  gradcheck->add_option("--size", gc_size, "Image side, even, 6 to 16")->capture_default_str();
  gradcheck->add_option("--coords", gc_coords, "Checked coordinates per parameter group")->capture_default_str();
  gradcheck->add_flag("--corrupt-backward", gc_corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  if (g.threads > 0) ntg::parallel::set_threads(g.threads);

  if (*extract) {
    const ntg::FeatureExtractor phi = extractor_for(ex, g);
    const ntg::FeaturePyramid pyr = ntg::extract_pyramid(phi, ntg::read_pgm(ex.input));
    ntg::NtxMap out;
    for (std::size_t l = 0; l < pyr.size(); ++l) out[level_name("features", l)] = ntg::to_ntx(pyr[l]);
    ntg::write_ntx1(out, ex.out);
    return kOk;
  }
  if (*match || *swap) {
    const FeatureArgs& a = *match ? ma : sw;
    const ntg::TextureMaps maps = run_match(a, g);
    ntg::NtxMap out;
    for (std::size_t l = 0; l < maps.size(); ++l) {
      if (!maps[l]) continue;
      if (*match) {
        out[level_name("index", l)] = ntg::to_ntx(maps[l]->index_map);
        out[level_name("score", l)] = ntg::to_ntx(maps[l]->weight_map);
      } else {
        out[level_name("swapped", l)] = ntg::to_ntx(maps[l]->swapped);
        out[level_name("weight", l)] = ntg::to_ntx(maps[l]->weight_map);
      }
    }
    ntg::write_ntx1(out, a.out);
    return kOk;
  }
  if (*synth) {
    const ntg::TrainConfig cfg = base_config(g);
    ntg::TrainMode mode;
    try {
      mode = ntg::parse_mode(sy_mode);
    } catch (const ntg::ArgumentError&) {
      throw UsageError("--mode must be full, single or none");
    }
    if (mode != ntg::TrainMode::no_texture && sy_refs.empty()) throw UsageError("--ref is required unless --mode none");
    if (sy_scale != 1 && sy_scale != 2) throw UsageError("--scale must be 1 or 2");
    if (sy_gen != "G" && sy_gen != "F") throw UsageError("--generator must be G or F");
    const ntg::Pipeline p = ntg::load_pipeline(ntg::read_ntx1(sy_weights), sy_gen, sy_scale);
    std::vector<ntg::Grid> refs;
    for (const auto& r : sy_refs) refs.push_back(ntg::read_pgm(r));
    const ntg::Grid out = ntg::synthesize(p, ntg::read_pgm(sy_input), refs, mode, cfg.blur_factor, cfg.patch_size);
    ntg::write_pgm(out, sy_out);
    if (!sy_target.empty()) std::cout << eval_csv_row(evaluate_files(fs::path(sy_out).stem().string(), sy_out, sy_target)) << "\n";
    return kOk;
  }
  if (*train) {
    ntg::TrainConfig cfg = base_config(g);
    if (!tr_mode.empty()) cfg.mode = ntg::parse_mode(tr_mode);
    if (train->count("--epochs")) cfg.epochs = tr_epochs;
    if (!tr_plan.empty()) cfg.channel_plan = tr_plan;
    ntg::run_training(cfg, tr_out, [](const ntg::EpochRow& r) {
      std::fprintf(stderr, "epoch %zu total %s cyc %s val_psnr %s\n", r.epoch, ntg::csv_number(r.loss.total).c_str(),
                   ntg::csv_number(r.loss.cyc).c_str(), ntg::csv_number(r.val_psnr).c_str());
    });
    return kOk;
  }
  if (*eval) {
    const auto outs = pgm_files(ev_outputs);
    const bool dir = fs::is_directory(ev_targets);
    std::vector<ntg::metrics::MetricRow> rows;
    for (const auto& o : outs) {
      const fs::path t = dir ? fs::path(ev_targets) / o.filename() : fs::path(ev_targets);
      rows.push_back(evaluate_files(o.stem().string(), o, t));
    }
    if (rows.empty()) throw UsageError("no output images found");
    std::string csv = "id,ssim,mse,psnr,histcorr\n";
    for (const auto& r : rows) csv += eval_csv_row(r) + "\n";
    csv += summary_block(rows);
    if (ev_out.empty()) {
      std::cout << csv;
    } else {
      ntg::detail::write_text_atomic(ev_out, csv);
    }
    return kOk;
  }
  if (*gendata) {
    ntg::TrainConfig cfg = base_config(g);
    if (gd_size) cfg.corpus.image_size = gd_size;
    if (gendata->count("--train-count")) cfg.corpus.train_count = gd_train;
    if (gendata->count("--val-count")) cfg.corpus.val_count = gd_val;
    const ntg::ToyCorpus c = ntg::make_toy_corpus(cfg.corpus);
    const fs::path root(gd_out);
    for (const char* d : {"X/train", "Y/train", "pairs/val"}) fs::create_directories(root / d);
    std::string manifest = "split,domain,id,path\n";
    auto put = [&](const ntg::Grid& img, const char* split, const char* domain, const std::string& rel) {
      ntg::write_pgm(img, root / rel);
      manifest += std::string(split) + "," + domain + "," + fs::path(rel).stem().string() + "," + rel + "\n";
    };
    char name[64];
    for (std::size_t i = 0; i < c.x_train.size(); ++i) {
      std::snprintf(name, sizeof name, "X/train/x_%04zu.pgm", i);
      put(c.x_train[i], "train", "X", name);
    }
    for (std::size_t i = 0; i < c.y_train.size(); ++i) {
      std::snprintf(name, sizeof name, "Y/train/y_%04zu.pgm", i);
      put(c.y_train[i], "train", "Y", name);
    }
    for (std::size_t i = 0; i < c.val_x.size(); ++i) {
      std::snprintf(name, sizeof name, "pairs/val/x_%04zu.pgm", i);
      put(c.val_x[i], "val", "X", name);
      std::snprintf(name, sizeof name, "pairs/val/y_%04zu.pgm", i);
      put(c.val_y[i], "val", "Y", name);
    }
    ntg::detail::write_text_atomic(root / "manifest.csv", manifest);
    return kOk;
  }
  if (*gradcheck) {
    if (gc_size > 16) throw UsageError("--size must be at most 16");
    ntg::ad::testing::corrupt_gram_backward() = gc_corrupt;
    const ntg::GradcheckReport r = ntg::run_gradcheck(gc_size, g.seed, 1e-5, gc_coords);
    std::cout << r.text();
    if (!r.passed()) {
      std::cerr << "gradcheck: term '" << r.first_failure() << "' exceeds relative error " << r.tolerance << "\n";
      return kNumeric;
    }
    return kOk;
  }
  return kUsage;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ntg::NumericError& e) {
    std::cerr << "numeric failure in '" << e.term() << "': " << e.what() << "\n";
    return kNumeric;
  } catch (const ntg::ArgumentError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const ntg::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
}
