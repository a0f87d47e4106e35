#include "px3d/dataset.hpp"

#include <cstdio>

#include <nlohmann/json.hpp>

#include "px3d/error.hpp"
#include "px3d/io.hpp"

namespace px3d {

namespace fs = std::filesystem;

std::vector<SampleRecord> SampleManifest::split(const std::string& name) const {
    std::vector<SampleRecord> out;
    for (const auto& r : records)
        if (name.empty() || name == "all" || r.split == name) out.push_back(r);
    return out;
}

std::string split_for(int n, const GenDataConfig& config) {
    const int train = config.count - config.val_phantoms - config.test_phantoms;
    if (n < train) return "train";
    if (n < train + config.val_phantoms) return "val";
    return "test";
}

std::string record_to_json(const SampleRecord& r) {
    nlohmann::ordered_json j;
    j["id"] = r.id;
    j["px"] = r.px_path;
    j["unfolded"] = r.unfolded_path;
    j["class_id"] = r.class_id;
    j["class"] = std::string(misalignment_name(static_cast<Misalignment>(r.class_id)));
    j["binary_label"] = r.binary_label;
    j["lesion_mask"] = r.mask_path ? nlohmann::ordered_json(*r.mask_path) : nlohmann::ordered_json(nullptr);
    j["source_phantom"] = r.source_phantom;
    j["split"] = r.split;
    j["degrees"] = r.degrees;
    return j.dump();
}

SampleRecord record_from_json(const std::string& line) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest: malformed line: ") + e.what());
    }
    SampleRecord r;
    try {
        r.id = j.at("id").get<std::string>();
        r.px_path = j.at("px").get<std::string>();
        r.unfolded_path = j.at("unfolded").get<std::string>();
        r.class_id = j.at("class_id").get<int>();
        r.binary_label = j.at("binary_label").get<int>();
        if (!j.at("lesion_mask").is_null()) r.mask_path = j.at("lesion_mask").get<std::string>();
        r.source_phantom = j.at("source_phantom").get<std::string>();
        r.split = j.at("split").get<std::string>();
        r.degrees = j.value("degrees", 0.0);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(std::string("manifest: missing or mistyped field: ") + e.what());
    }
    if (r.class_id < 0 || r.class_id >= kMisalignmentClasses)
        throw FormatError("manifest: class_id " + std::to_string(r.class_id) + " outside [0,5) for " + r.id);
    if (r.binary_label != (r.class_id == 0 ? 0 : 1))
        throw FormatError("manifest: binary_label inconsistent with class_id for " + r.id);
    if (r.split != "train" && r.split != "val" && r.split != "test")
        throw FormatError("manifest: unknown split '" + r.split + "' for " + r.id);
    return r;
}

SampleManifest generate_samples(const GenDataConfig& config, const fs::path& out_dir) {
    if (config.count < 1) throw ConfigError("count must be >= 1");
    if (config.val_phantoms < 0 || config.test_phantoms < 0 || config.val_phantoms + config.test_phantoms > config.count)
        throw ConfigError("val/test phantom counts exceed count");
    config.phantom.validate();
    config.projection.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec || !fs::is_directory(out_dir)) throw IoError("cannot create output directory " + out_dir.string());

    SampleManifest manifest;
    manifest.directory = out_dir;
    std::string lines;
    for (int n = 0; n < config.count; ++n) {
        PhantomConfig pc = config.phantom;
        pc.seed = config.seed + static_cast<std::uint64_t>(n);
        const Phantom ph = generate_phantom(pc);
        char pid[32];
        std::snprintf(pid, sizeof pid, "phantom_%05d", n);
        if (config.write_phantoms) {
            io::write_volume(ph.volume, out_dir / (std::string(pid) + ".rvol"));
            io::write_volume(ph.lesion_mask, out_dir / (std::string(pid) + "_lesion.rvol"));
        }
        const auto samples = build_samples(ph, config.projection);
        for (std::size_t s = 0; s < samples.size(); ++s) {
            const Sample& smp = samples[s];
            char sid[48];
            std::snprintf(sid, sizeof sid, "%s_s%zu", pid, s);
            SampleRecord r;
            r.id = sid;
            r.px_path = std::string(sid) + "_px.png";
            r.unfolded_path = std::string(sid) + "_unfolded.rvol";
            r.class_id = static_cast<int>(smp.misalignment);
            r.binary_label = smp.binary_label;
            r.source_phantom = pid;
            r.split = split_for(n, config);
            r.degrees = smp.degrees;
            io::write_png16(smp.px, out_dir / r.px_path);
            nlohmann::ordered_json side;
            side["rows"] = smp.px.rows;
            side["cols"] = smp.px.cols;
            side["encoding"] = "uint16 = round(value * 65535)";
            side["sample"] = r.id;
            side["class"] = std::string(misalignment_name(smp.misalignment));
            io::atomic_write(out_dir / (std::string(sid) + "_px.json"), side.dump(2) + "\n");
            io::write_volume(smp.unfolded, out_dir / r.unfolded_path);
            if (smp.lesion_mask_2d) {
                r.mask_path = std::string(sid) + "_mask.png";
                io::write_png16(*smp.lesion_mask_2d, out_dir / *r.mask_path);
            }
            lines += record_to_json(r) + "\n";
            manifest.records.push_back(std::move(r));
        }
        nlohmann::ordered_json meta;
        meta["id"] = pid;
        meta["split"] = split_for(n, config);
        meta["metadata"] = nlohmann::json::parse(phantom_metadata_json(ph.metadata));
        io::atomic_write(out_dir / (std::string(pid) + ".json"), meta.dump(2) + "\n");
    }
    io::atomic_write(out_dir / "manifest.jsonl", lines);
    return manifest;
}

SampleManifest load_manifest(const fs::path& path) {
    const fs::path file = fs::is_directory(path) ? path / "manifest.jsonl" : path;
    if (!fs::exists(file)) throw IoError("manifest not found: " + file.string());
    SampleManifest m;
    m.directory = file.parent_path();
    const std::string text = io::read_file(file);
    std::size_t start = 0;
    while (start < text.size()) {
        std::size_t end = text.find('\n', start);
        if (end == std::string::npos) end = text.size();
        const std::string line = text.substr(start, end - start);
        start = end + 1;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        SampleRecord r = record_from_json(line);
        for (const std::string* p : {&r.px_path, &r.unfolded_path})
            if (!fs::exists(m.directory / *p)) throw IoError("manifest: missing file " + (m.directory / *p).string());
        if (r.mask_path && !fs::exists(m.directory / *r.mask_path))
            throw IoError("manifest: missing file " + (m.directory / *r.mask_path).string());
        m.records.push_back(std::move(r));
    }
    if (m.records.empty()) throw FormatError("manifest: no records in " + file.string());
    return m;
}

std::vector<LoadedSample> load_samples(const SampleManifest& manifest, const std::vector<SampleRecord>& records) {
    std::vector<LoadedSample> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        LoadedSample s;
        s.record = r;
        s.px = io::read_png16(manifest.directory / r.px_path);
        s.unfolded = io::read_volume(manifest.directory / r.unfolded_path);
        if (r.mask_path) s.mask = io::read_png16(manifest.directory / *r.mask_path);
        out.push_back(std::move(s));
    }
    return out;
}

std::vector<Sample> build_sample_set(const PhantomConfig& phantom, const ProjectionConfig& projection, int count,
                                     std::uint64_t seed) {
    std::vector<Sample> out;
    for (int n = 0; n < count; ++n) {
        PhantomConfig pc = phantom;
        pc.seed = seed + static_cast<std::uint64_t>(n);
        auto s = build_samples(generate_phantom(pc), projection);
        for (auto& x : s) out.push_back(std::move(x));
    }
    return out;
}

}  // namespace px3d
