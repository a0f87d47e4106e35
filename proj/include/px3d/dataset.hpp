#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "px3d/geometry.hpp"
#include "px3d/phantom.hpp"

namespace px3d {

/// One manifest line. Paths are relative to the manifest's directory.
struct SampleRecord {
    std::string id;
    std::string px_path;
    std::string unfolded_path;
    int class_id = 0;
    int binary_label = 0;
    std::optional<std::string> mask_path;
    std::string source_phantom;
    std::string split;  ///< train, val or test
    double degrees = 0.0;
};

struct SampleManifest {
    std::filesystem::path directory;
    std::vector<SampleRecord> records;

    std::vector<SampleRecord> split(const std::string& name) const;
};

struct GenDataConfig {
    PhantomConfig phantom;
    ProjectionConfig projection = ProjectionConfig::desk();
    int count = 8;                ///< phantoms; each yields 7 samples
    std::uint64_t seed = 0;
    int val_phantoms = 0;
    int test_phantoms = 0;       ///< the last phantoms go to test, the ones before to val
    bool write_phantoms = false;  ///< also write the raw phantom volumes
};

/// Split tag of phantom n: train first, then val, then test.
std::string split_for(int n, const GenDataConfig& config);

/// Writes px PNG16 (+ JSON sidecar), unfolded RVOL and lesion-mask PNG16 per
/// sample and `manifest.jsonl`. Output bytes depend only on the config.
SampleManifest generate_samples(const GenDataConfig& config, const std::filesystem::path& out_dir);

std::string record_to_json(const SampleRecord& r);
SampleRecord record_from_json(const std::string& line);

/// Parses manifest.jsonl (file or its directory) and checks every referenced path exists.
SampleManifest load_manifest(const std::filesystem::path& path);

struct LoadedSample {
    SampleRecord record;
    Image px;
    Volume unfolded;
    std::optional<Image> mask;
};

std::vector<LoadedSample> load_samples(const SampleManifest& manifest, const std::vector<SampleRecord>& records);

/// In-memory equivalent of generate_samples for a range of phantom seeds.
std::vector<Sample> build_sample_set(const PhantomConfig& phantom, const ProjectionConfig& projection, int count,
                                     std::uint64_t seed);

}  // namespace px3d
