// SPDX-License-Identifier: Apache-2.0
//
// efps: command-line driver for data generation, observation maps, training,
// evaluation, normal/error map rendering and calibration utilities.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "efps/common.hpp"
#include "efps/geometry.hpp"
#include "efps/io/binary.hpp"
#include "efps/io/dataset.hpp"
#include "efps/io/keyvalue.hpp"
#include "efps/io/png.hpp"
#include "efps/obsmap.hpp"
#include "efps/synthgen.hpp"
#include "efps/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace efps;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

void write_text(const std::string& path, const std::string& text) {
  io::write_atomic(path, [&](std::ostream& os) { os << text; });
}

/// Sidecar manifest written next to a command's main output.
void write_manifest(const std::string& path, json body) {
  body["tool_version"] = kVersion;
  write_text(path, body.dump(2) + "\n");
}

std::string normals_path_for(const std::string& obs_path) {
  return fs::path(obs_path).replace_extension(".nrm1").string();
}

struct LoadedObs {
  std::string name;
  obsmap::Obs1Header header;
  std::vector<obsmap::ObservationMapSet> samples;
};

/// Reads an OBS1 file and, when present, the per-sample normals next to it.
LoadedObs load_obs(const std::string& path, bool need_normals) {
  LoadedObs out;
  out.name = fs::path(path).stem().string();
  out.samples = obsmap::decode_obs1(io::read_file(path), path, &out.header);
  const std::string npath = normals_path_for(path);
  if (fs::exists(npath)) {
    const auto nm = obsmap::decode_nrm1(io::read_file(npath), npath);
    if (nm.normals.size() != out.samples.size())
      throw Error(npath + " holds " + std::to_string(nm.normals.size()) + " normals for " +
                  std::to_string(out.samples.size()) + " samples");
    for (std::size_t i = 0; i < nm.normals.size(); ++i) {
      out.samples[i].has_normal = true;
      out.samples[i].normal = nm.normals[i].cast<double>().normalized();
    }
  } else if (need_normals) {
    throw Error("missing ground-truth normals " + npath);
  }
  return out;
}

Eigen::Vector3d parse_vec3(const std::string& s) {
  std::string t = s;
  for (char& c : t)
    if (c == ',') c = ' ';
  std::istringstream ss(t);
  double x, y, z;
  if (!(ss >> x >> y >> z)) throw Error("expected three comma-separated numbers, got `" + s + "`");
  return {x, y, z};
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string scene = "sphere";
  int frames = 64;
  std::string out;
  std::uint64_t seed = 1;
  int size = 64;
  double ambient = 0.15;
  double contrast = 0.15;
  int substeps = 8;
};

int cmd_gen_data(const GenArgs& a) {
  const auto t0 = Clock::now();
  synth::SceneSpec spec;
  spec.kind = synth::parse_scene(a.scene);
  spec.width = spec.height = a.size;
  spec.ambient = a.ambient;
  spec.seed = a.seed;
  synth::EventSimConfig ev;
  ev.contrast = a.contrast;
  ev.substeps = a.substeps;
  const obsmap::Capture cap = synth::generate_capture(spec, a.frames, ev);
  json m;
  m["command"] = "gen-data";
  m["scene"] = a.scene;
  m["seed"] = a.seed;
  m["ambient"] = a.ambient;
  m["contrast"] = ev.contrast;
  m["log_eps"] = ev.log_eps;
  m["substeps"] = ev.substeps;
  m["events"] = cap.events.events.size();
  m["tool_version"] = kVersion;
  m["seconds"] = seconds_since(t0);
  io::save_capture(a.out, cap, ev.frame_period, m);
  std::printf("wrote %d frames, %zu events to %s\n", a.frames, cap.events.events.size(), a.out.c_str());
  return 0;
}

struct ObsmapArgs {
  std::string data;
  int m = 32;
  std::string out;
  double lambda = eventrep::kDefaultLambda;
  int bins = eventrep::kDefaultBins;
  bool no_events = false;
};

int cmd_obsmap(const ObsmapArgs& a) {
  const auto t0 = Clock::now();
  const obsmap::Capture cap = io::load_capture(a.data);
  obsmap::SampleOptions opt;
  opt.m = a.m;
  opt.lambda = a.lambda;
  opt.bins = a.bins;
  opt.with_events = !a.no_events;
  const auto samples = obsmap::build_samples(cap, opt);
  const int channels = opt.with_events ? obsmap::kAllChannels : obsmap::kRgbChannels;
  io::write_bytes_atomic(a.out, obsmap::encode_obs1(samples, a.m, channels));
  if (!cap.normals.empty()) {
    obsmap::NormalMap nm;
    nm.width = static_cast<int>(samples.size());
    nm.height = 1;
    for (const auto& s : samples) nm.normals.push_back(s.normal.cast<float>());
    io::write_bytes_atomic(normals_path_for(a.out), obsmap::encode_nrm1(nm));
  }
  write_manifest(a.out + ".manifest.json", {{"command", "obsmap"},
                                            {"inputs", {a.data}},
                                            {"outputs", {a.out}},
                                            {"m", a.m},
                                            {"lambda", a.lambda},
                                            {"bins", a.bins},
                                            {"pixels", samples.size()},
                                            {"seconds", seconds_since(t0)}});
  std::printf("wrote %zu samples (m=%d, %d channels) to %s\n", samples.size(), a.m, channels, a.out.c_str());
  return 0;
}

struct TrainArgs {
  std::vector<std::string> obs;
  std::string config;
  std::string out;
  std::string loss_csv;
  std::string ablation;
  int subsample = 1;
};

int cmd_train(const TrainArgs& a) {
  const auto t0 = Clock::now();
  net::NetConfig cfg = a.config.empty() ? net::NetConfig{} : net::NetConfig::from_keyvalue(io::KeyValueFile::load(a.config));
  if (!a.ablation.empty()) cfg.ablation = net::parse_ablation(a.ablation);
  std::vector<obsmap::ObservationMapSet> samples;
  for (const auto& path : a.obs) {
    LoadedObs lo = load_obs(path, true);
    if (static_cast<int>(lo.header.m) != cfg.m)
      throw Error(path + " has m=" + std::to_string(lo.header.m) + " but the config asks for m=" +
                  std::to_string(cfg.m));
    for (std::size_t i = 0; i < lo.samples.size(); i += static_cast<std::size_t>(a.subsample))
      samples.push_back(std::move(lo.samples[i]));
  }
  net::Model<float> model(cfg.ablation, cfg.widths());
  Rng rng(cfg.seed);
  model.init(rng);
  const net::TrainResult res = net::train(model, samples, cfg, [](const net::EpochLoss& e) {
    std::printf("epoch %3d  L_e %.5f  L_n %.5f  L_total %.5f\n", e.epoch, e.l_e, e.l_n, e.total());
    std::fflush(stdout);
  });
  io::write_bytes_atomic(a.out, diff::encode_checkpoint(net::save_model(model, cfg)));
  std::ostringstream csv;
  csv << "epoch,steps,lr,l_e,l_n,l_total\n";
  csv.precision(9);
  for (const auto& e : res.history)
    csv << e.epoch << ',' << e.steps << ',' << e.lr << ',' << e.l_e << ',' << e.l_n << ',' << e.total() << '\n';
  const std::string loss_path = a.loss_csv.empty() ? a.out + ".loss.csv" : a.loss_csv;
  write_text(loss_path, csv.str());
  write_manifest(a.out + ".manifest.json", {{"command", "train"},
                                            {"config", a.config},
                                            {"inputs", a.obs},
                                            {"outputs", {a.out, loss_path}},
                                            {"seed", cfg.seed},
                                            {"settings", cfg.to_map()},
                                            {"samples", samples.size()},
                                            {"steps", res.steps},
                                            {"seconds", seconds_since(t0)}});
  std::printf("trained %lld steps on %zu samples; checkpoint %s\n", res.steps, res.samples_per_epoch,
              a.out.c_str());
  return 0;
}

struct EvalArgs {
  std::vector<std::string> obs;
  std::string ckpt;
  std::string report;
  std::string pred_out;
};

int cmd_eval(const EvalArgs& a) {
  const auto t0 = Clock::now();
  const diff::Checkpoint ck = diff::decode_checkpoint(io::read_file(a.ckpt), a.ckpt);
  net::NetConfig cfg;
  net::Model<float> model = net::load_model(ck, &cfg);
  std::vector<LoadedObs> objects;
  for (const auto& path : a.obs) {
    LoadedObs lo = load_obs(path, true);
    if (static_cast<int>(lo.header.m) != cfg.m)
      throw Error("checkpoint was trained with m=" + std::to_string(cfg.m) + " but " + path + " has m=" +
                  std::to_string(lo.header.m));
    if (static_cast<int>(lo.header.channels) < model.input_channels())
      throw Error("checkpoint expects " + std::to_string(model.input_channels()) + " channels but " + path +
                  " has " + std::to_string(lo.header.channels));
    objects.push_back(std::move(lo));
  }
  std::vector<net::LabeledObject> labeled;
  for (const auto& o : objects) labeled.push_back({o.name, &o.samples});
  const net::EvalReport rep = net::evaluate(model, labeled);

  std::ostringstream csv, table;
  csv << "object,pixels,mae_deg\n";
  table << "object                 pixels   mae_deg\n";
  std::size_t total = 0;
  char line[160];
  for (const auto& o : rep.objects) {
    std::snprintf(line, sizeof line, "%s,%zu,%.4f\n", o.object.c_str(), o.pixels, o.mae_deg);
    csv << line;
    std::snprintf(line, sizeof line, "%-20s %8zu %9.2f\n", o.object.c_str(), o.pixels, o.mae_deg);
    table << line;
    total += o.pixels;
  }
  std::snprintf(line, sizeof line, "average,%zu,%.4f\n", total, rep.average_deg);
  csv << line;
  std::snprintf(line, sizeof line, "%-20s %8zu %9.2f\n", "average", total, rep.average_deg);
  table << line;
  write_text(a.report, csv.str());
  std::cout << table.str();

  std::vector<std::string> outputs{a.report};
  if (!a.pred_out.empty()) {
    obsmap::NormalMap nm;
    nm.height = 1;
    for (const auto& o : objects)
      for (const auto& n : net::predict(model, o.samples)) nm.normals.push_back(n.cast<float>());
    nm.width = static_cast<int>(nm.normals.size());
    io::write_bytes_atomic(a.pred_out, obsmap::encode_nrm1(nm));
    outputs.push_back(a.pred_out);
  }
  write_manifest(a.report + ".manifest.json", {{"command", "eval"},
                                               {"inputs", a.obs},
                                               {"checkpoint", a.ckpt},
                                               {"outputs", outputs},
                                               {"average_mae_deg", rep.average_deg},
                                               {"seconds", seconds_since(t0)}});
  return 0;
}

struct RenderArgs {
  std::string pred;
  std::string gt;
  std::string mask;
  std::string out_png;
  std::string err_png;
};

/// Normal map laid out on the image grid. A 1-row map with one entry per
/// mask pixel is scattered into the mask in row-major order.
struct GridNormals {
  int width = 0, height = 0;
  std::vector<Eigen::Vector3d> n;
  std::vector<bool> valid;
};

GridNormals to_grid(const obsmap::NormalMap& nm, const std::optional<Mask>& mask) {
  GridNormals g;
  if (mask && nm.height == 1 && static_cast<std::size_t>(nm.width) != mask->pixel_count()) {
    g.width = mask->width;
    g.height = mask->height;
    g.n.assign(mask->pixel_count(), Eigen::Vector3d::Zero());
    g.valid.assign(mask->pixel_count(), false);
    std::size_t k = 0;
    for (std::size_t i = 0; i < mask->pixel_count(); ++i) {
      if (!mask->data[i]) continue;
      if (k >= nm.normals.size()) throw Error("fewer normals than mask pixels");
      g.n[i] = nm.normals[k++].cast<double>();
      g.valid[i] = true;
    }
    if (k != nm.normals.size()) throw Error("more normals than mask pixels");
    return g;
  }
  g.width = nm.width;
  g.height = nm.height;
  for (std::size_t i = 0; i < nm.normals.size(); ++i) {
    g.n.push_back(nm.normals[i].cast<double>());
    const bool inside = !mask || (mask->pixel_count() == nm.normals.size() && mask->data[i]);
    g.valid.push_back(inside && g.n.back().norm() > 0.5);
  }
  return g;
}

int cmd_render(const RenderArgs& a) {
  std::optional<Mask> mask;
  if (!a.mask.empty()) {
    const io::Image8 m = io::read_png(a.mask, 1);
    mask = Mask(m.width, m.height, 1, 0);
    for (std::size_t i = 0; i < m.data.size(); ++i) mask->data[i] = m.data[i] ? 255 : 0;
  }
  const GridNormals pred = to_grid(obsmap::decode_nrm1(io::read_file(a.pred), a.pred), mask);
  io::Image8 img(pred.width, pred.height, 3, 0);
  for (std::size_t i = 0; i < pred.n.size(); ++i) {
    if (!pred.valid[i]) continue;
    for (int c = 0; c < 3; ++c) img.data[3 * i + c] = io::to_byte((pred.n[i][c] + 1.0) / 2.0);
  }
  io::write_png(a.out_png, img);
  std::vector<std::string> outputs{a.out_png};
  if (!a.gt.empty()) {
    const GridNormals gt = to_grid(obsmap::decode_nrm1(io::read_file(a.gt), a.gt), mask);
    if (gt.width != pred.width || gt.height != pred.height)
      throw Error("prediction and ground truth differ in size");
    const std::string err_path =
        a.err_png.empty() ? fs::path(a.out_png).replace_extension("").string() + "_error.png" : a.err_png;
    const io::Image8 err = [&] {
      io::Image8 e(pred.width, pred.height, 3, 0);
      for (std::size_t i = 0; i < pred.n.size(); ++i) {
        if (!pred.valid[i] || !gt.valid[i]) continue;
        const auto rgb = net::error_color(net::angular_error_deg(pred.n[i], gt.n[i]));
        for (int c = 0; c < 3; ++c) e.data[3 * i + c] = rgb[c];
      }
      return e;
    }();
    io::write_png(err_path, err);
    outputs.push_back(err_path);
  }
  for (const auto& o : outputs) std::printf("wrote %s\n", o.c_str());
  return 0;
}

struct ChromeArgs {
  std::string calib;
  std::vector<std::string> frames;
  std::string ball_mask;
  std::string center;
  double radius = 35.0;
  double threshold = 0.98;
  bool undistort = false;
  std::string out;
};

int cmd_chrome_light(const ChromeArgs& a) {
  const geometry::Calibration cal = io::load_calibration(a.calib);
  const io::Image8 m = io::read_png(a.ball_mask, 1);
  Mask mask(m.width, m.height, 1, 0);
  for (std::size_t i = 0; i < m.data.size(); ++i) mask.data[i] = m.data[i] ? 255 : 0;
  const Eigen::Vector3d center = parse_vec3(a.center);
  std::vector<LightSample> lights;
  for (std::size_t j = 0; j < a.frames.size(); ++j) {
    const ImageF gray = to_gray(io::dequantize(io::read_png(a.frames[j], 3)));
    geometry::Vec2 px = geometry::detect_highlight(gray, mask, a.threshold);
    if (a.undistort) px = geometry::undistort_point(px, cal.intrinsics, cal.distortion);
    const auto obs = geometry::observe_chrome_ball(center, a.radius, px, cal.intrinsics);
    LightSample l;
    l.frame_index = static_cast<int>(j);
    l.direction = geometry::recover_light(obs, cal.intrinsics).normalized();
    lights.push_back(l);
  }
  const std::string csv = io::format_lights_csv(lights);
  if (a.out.empty())
    std::cout << csv;
  else
    write_text(a.out, csv);
  return 0;
}

struct CalibMapArgs {
  std::string calib;
  std::string mode = "undistort";
  std::vector<std::string> points;
};

int cmd_calib_map(const CalibMapArgs& a) {
  const geometry::Calibration cal = io::load_calibration(a.calib);
  std::printf("x,y\n");
  for (const auto& p : a.points) {
    std::string t = p;
    for (char& c : t)
      if (c == ',') c = ' ';
    std::istringstream ss(t);
    double x, y;
    if (!(ss >> x >> y)) throw Error("expected a point `x,y`, got `" + p + "`");
    geometry::Vec2 q;
    if (a.mode == "undistort")
      q = geometry::undistort_point({x, y}, cal.intrinsics, cal.distortion);
    else if (a.mode == "distort")
      q = geometry::invert_distortion({x, y}, cal.intrinsics, cal.distortion);
    else if (a.mode == "transfer")
      q = geometry::transfer_rgb_to_event({x, y}, cal.p_rgb, cal.p_e);
    else
      throw Error("unknown mode `" + a.mode + "` (expected undistort, distort, transfer)");
    std::printf("%.9g,%.9g\n", q.x(), q.y());
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Event-fusion photometric stereo toolkit"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  int threads = 0;

  GenArgs gen;
  auto* c_gen = app.add_subcommand("gen-data", "Render a synthetic capture directory");
  c_gen->add_option("--scene", gen.scene, "sphere, blob or ramp")->capture_default_str();
  c_gen->add_option("--frames", gen.frames, "Frame count")->check(CLI::Range(2, 100000))->capture_default_str();
  c_gen->add_option("--out", gen.out, "Output directory")->required();
  c_gen->add_option("--seed", gen.seed, "Scene seed")->capture_default_str();
  c_gen->add_option("--size", gen.size, "Image width and height")->check(CLI::Range(4, 4096))->capture_default_str();
  c_gen->add_option("--ambient", gen.ambient, "Ambient level")->check(CLI::Range(0.0, 0.999))->capture_default_str();
  c_gen->add_option("--contrast", gen.contrast, "Event contrast threshold")->capture_default_str();
  c_gen->add_option("--substeps", gen.substeps, "Event sub-steps per frame")->check(CLI::PositiveNumber)->capture_default_str();

  ObsmapArgs om;
  auto* c_obs = app.add_subcommand("obsmap", "Build per-pixel observation maps (OBS1)");
  c_obs->add_option("--data", om.data, "Capture directory")->required();
  c_obs->add_option("--m", om.m, "Map resolution")->check(CLI::IsMember({16, 32}))->capture_default_str();
  c_obs->add_option("--out", om.out, "Output OBS1 file")->required();
  c_obs->add_option("--lambda", om.lambda, "Voxel count divisor")->capture_default_str();
  c_obs->add_option("--bins", om.bins, "Voxel time bins")->capture_default_str();
  c_obs->add_flag("--no-events", om.no_events, "Store only r, g, b, n");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train a model on OBS1 files");
  c_train->add_option("--obs", tr.obs, "OBS1 file (repeatable; one per object)")->required();
  c_train->add_option("--config", tr.config, "key = value training config");
  c_train->add_option("--out", tr.out, "Output checkpoint")->required();
  c_train->add_option("--loss-csv", tr.loss_csv, "Loss history CSV (default: <out>.loss.csv)");
  c_train->add_option("--ablation", tr.ablation, "Override: full, no_ei, no_ofm, no_event");
  c_train->add_option("--subsample", tr.subsample, "Use every n-th sample")->check(CLI::PositiveNumber);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Report mean angular error");
  c_eval->add_option("--obs", ev.obs, "OBS1 file (repeatable)")->required();
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  c_eval->add_option("--report", ev.report, "CSV report path")->required();
  c_eval->add_option("--pred-out", ev.pred_out, "Write predicted normals (NRM1)");

  RenderArgs rn;
  auto* c_render = app.add_subcommand("render-normals", "Write normal and error map PNGs");
  c_render->add_option("--pred", rn.pred, "Predicted normals (NRM1)")->required();
  c_render->add_option("--gt", rn.gt, "Ground-truth normals (NRM1)");
  c_render->add_option("--mask", rn.mask, "Mask PNG for per-sample normal lists");
  c_render->add_option("--out-png", rn.out_png, "Normal map PNG")->required();
  c_render->add_option("--err-png", rn.err_png, "Error map PNG (default: <out>_error.png)");

  ChromeArgs ch;
  auto* c_chrome = app.add_subcommand("chrome-light", "Light directions from chrome-ball frames");
  c_chrome->add_option("--calib", ch.calib, "Calibration file")->required();
  c_chrome->add_option("--frame", ch.frames, "Frame PNG (repeatable)")->required();
  c_chrome->add_option("--ball-mask", ch.ball_mask, "Chrome ball mask PNG")->required();
  c_chrome->add_option("--center", ch.center, "Ball center x,y,z in camera coordinates (mm)")->required();
  c_chrome->add_option("--radius", ch.radius, "Ball radius (mm)")->capture_default_str();
  c_chrome->add_option("--threshold", ch.threshold, "Highlight threshold")->capture_default_str();
  c_chrome->add_flag("--undistort", ch.undistort, "Undistort the highlight pixel first");
  c_chrome->add_option("--out", ch.out, "Lights CSV (default: stdout)");

  CalibMapArgs cm;
  auto* c_map = app.add_subcommand("calib-map", "Map pixels through the calibration");
  c_map->add_option("--calib", cm.calib, "Calibration file")->required();
  c_map->add_option("--mode", cm.mode, "undistort, distort or transfer")->capture_default_str();
  c_map->add_option("--point", cm.points, "Pixel x,y (repeatable)")->required();

  for (auto* sub : {c_gen, c_obs, c_train, c_eval, c_render, c_chrome, c_map})
    sub->add_option("--threads", threads, "Worker threads (default: EFPS_THREADS, then all cores)")
        ->check(CLI::NonNegativeNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    set_threads(resolve_threads(threads));
    if (*c_gen) return cmd_gen_data(gen);
    if (*c_obs) return cmd_obsmap(om);
    if (*c_train) return cmd_train(tr);
    if (*c_eval) return cmd_eval(ev);
    if (*c_render) return cmd_render(rn);
    if (*c_chrome) return cmd_chrome_light(ch);
    if (*c_map) return cmd_calib_map(cm);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "efps: error: %s\n", e.what());
    return 1;
  }
  return 1;
}
