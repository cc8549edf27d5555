#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "melhubert/analysis.hpp"
#include "melhubert/corpus_io.hpp"
#include "melhubert/mel_frontend.hpp"
#include "melhubert/model.hpp"
#include "melhubert/probes.hpp"
#include "melhubert/quantizer.hpp"
#include "melhubert/trainer.hpp"

namespace melhubert {

/// Every knob of the command-line pipeline. Defaults are the desk setup;
/// presets switch to the full-size recipes. `model.input_dim` is not a key:
/// it is derived as mel.n_mels times the frame factor.
struct PipelineConfig {
  std::uint64_t seed = 0;  // feeds every module's seed
  std::filesystem::path run_dir = "run";
  int workers = 1;

  struct Paths {
    std::filesystem::path corpus;           // manifest.tsv or its directory
    std::filesystem::path features;         // directory written by `mel`
    std::filesystem::path norm;             // norm stats written by `mel`
    std::filesystem::path codebook;         // codebook written by `kmeans` or `relabel`
    std::filesystem::path labels;           // label file written by `kmeans` or `relabel`
    std::filesystem::path checkpoint;       // upstream for relabel, probe, cca
    std::filesystem::path init_checkpoint;  // stage-1 model, required by stage 2
    std::filesystem::path arch;             // ArchSpec text for `macs`
  } paths;

  SynthOptions synth;
  MelConfig mel;
  KMeansOptions kmeans;
  EncoderConfig model;
  TrainConfig train;
  StagePlan plan;
  double train_heldout_fraction = 0.1;
  bool checkpoint_every_epoch = true;

  struct Analysis {
    std::string cca = "both";  // phone, mel or both
    CcaConfig cca_cfg;
    std::int64_t cca_max_frames = 50'000;
    std::string arch_preset = "melhubert-20ms";
  } analysis;

  ProbeConfig probe;
  std::string probe_upstream = "checkpoint";  // or "random"

  std::string preset;     // last preset applied, informational
  bool macs_only = false;  // set by MACs-only presets

  PipelineConfig();
};

struct ConfigKey {
  std::string name;  // "section.key"
  std::string doc;
  std::function<void(PipelineConfig&, const std::string&)> set;  // throws ConfigError on a bad value
  std::function<std::string(const PipelineConfig&)> get;
};

const std::vector<ConfigKey>& config_keys();

std::vector<std::string> pipeline_preset_names();
/// Applies a named preset; unknown names raise ConfigError.
void apply_preset(PipelineConfig& cfg, const std::string& name);

/// defaults -> presets (in order) -> config file -> `section.key=value`
/// overrides. Unknown keys and unparsable values are collected and reported
/// together in one ConfigError.
PipelineConfig resolve_config(const std::optional<std::filesystem::path>& config_file,
                              const std::vector<std::string>& presets, const std::vector<std::string>& overrides);
PipelineConfig parse_config_text(const std::string& ini_text, PipelineConfig base = {}, const std::string& origin = "config");

/// INI text with every key in section order; parse_config_text of the output
/// reproduces the configuration.
std::string format_config(const PipelineConfig& cfg);

std::vector<std::string> pipeline_commands();

/// Checks module configs plus the inputs `command` needs; all problems are
/// reported together in one ConfigError.
void validate_for(const std::string& command, const PipelineConfig& cfg);

/// Runs one subcommand into cfg.run_dir, writing its artifacts, the config
/// snapshot (config.ini) and run_manifest.json. Human-readable results go to
/// `out`.
void run_command(const std::string& command, const PipelineConfig& cfg, std::ostream& out);

/// Full command-line entry point. Returns 0 on success, 2 on configuration
/// errors and 3 on runtime failures.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace melhubert
