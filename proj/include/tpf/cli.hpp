#pragma once

#include "tpf/data.hpp"

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

namespace tpf {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitTraining = 3 };

struct DatagenOptions {
  std::filesystem::path backgrounds;  // directory of images; empty with procedural > 0
  int64_t procedural = 0;             // number of generated backgrounds when no directory is given
  std::filesystem::path out;
  int64_t count = 0;
  uint64_t seed = 0;
  int64_t val = 0;   // the last `val + test` records go to these splits
  int64_t test = 0;
  std::vector<std::string> overrides;  // TextSpec key=value
  bool force = false;
};

/// Writes `count` (input, text-free, mask) triples and manifest.txt into
/// options.out. Output is byte-identical for identical options.
DatasetManifest cmd_datagen(const DatagenOptions& options);

/// Loads every record of `manifest` and checks the sample invariants. With
/// `synthetic`, also checks that input and text-free are identical outside
/// the mask dilated by one pixel. Returns one message per violation.
std::vector<std::string> audit_manifest(const DatasetManifest& manifest, bool synthetic = false);

/// Full command-line entry point: args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace tpf
