#pragma once
// Run-directory persistence: CSV writers with stable formatting, model
// serialization, the run manifest, and a single-writer lock.

#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "splitgan/errors.hpp"
#include "splitgan/model_graph.hpp"
#include "splitgan/split_engine.hpp"
#include "splitgan/version.hpp"

namespace splitgan {

// fixed float formatting so equal runs produce byte-identical files
inline std::string format_g(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

class CsvWriter {
public:
    CsvWriter() = default;
    CsvWriter(const std::string& path, const std::vector<std::string>& header) {
        out_.open(path);
        if (!out_) throw UsageError("cannot open CSV for writing: " + path);
        for (size_t i = 0; i < header.size(); ++i)
            out_ << (i ? "," : "") << header[i];
        out_ << "\n";
    }

    void row(const std::vector<std::string>& cells) {
        for (size_t i = 0; i < cells.size(); ++i)
            out_ << (i ? "," : "") << cells[i];
        out_ << "\n";
    }

    void close() { out_.close(); }

private:
    std::ofstream out_;
};

inline void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot write " + path);
    out << text;
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path);
    if (!out) throw UsageError("cannot write " + path);
    out << j.dump(2) << "\n";
}

inline nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const std::exception& e) {
        throw ConfigError(path + ": " + std::string(e.what()));
    }
    return j;
}

// Guards a run directory against concurrent writers for the process lifetime.
class RunLock {
public:
    explicit RunLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
        if (std::filesystem::exists(path_))
            throw UsageError("run directory " + dir.string() +
                             " is locked by another writer (stale? remove .lock)");
        std::ofstream f(path_);
        f << "pid unknown\n";
        held_ = true;
    }
    ~RunLock() {
        if (held_) {
            std::error_code ec;
            std::filesystem::remove(path_, ec);
        }
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;

private:
    std::filesystem::path path_;
    bool held_ = false;
};

// ---------------------------------------------------------------------------
// Model state serialization

inline nlohmann::json segment_to_json(SegmentStore& s) {
    nlohmann::json j;
    j["first"] = s.first;
    j["last"] = s.last;
    nlohmann::json blocks = nlohmann::json::array();
    for (auto& b : s.blocks) {
        nlohmann::json bj;
        b.for_each_state([&](const char* name, Tensor& t) {
            bj[name] = {{"shape", t.shape}, {"data", t.data}};
        });
        blocks.push_back(std::move(bj));
    }
    j["blocks"] = std::move(blocks);
    return j;
}

inline void segment_from_json(const nlohmann::json& j, SegmentStore& s) {
    if (j.at("first").get<int>() != s.first || j.at("last").get<int>() != s.last)
        throw ConfigError("model state: segment range mismatch");
    const auto& blocks = j.at("blocks");
    for (size_t b = 0; b < s.blocks.size(); ++b) {
        s.blocks[b].for_each_state([&](const char* name, Tensor& t) {
            const auto& tj = blocks.at(b).at(name);
            auto shape = tj.at("shape").get<std::vector<int>>();
            if (shape != t.shape)
                throw ConfigError(std::string("model state: shape mismatch for ") + name);
            t.data = tj.at("data").get<std::vector<float>>();
        });
    }
}

inline nlohmann::json engine_state_to_json(SplitEngine& eng) {
    nlohmann::json j;
    j["profile"] = eng.profile->name;
    j["cuts"] = cuts_to_json(eng.cuts);
    nlohmann::json clients = nlohmann::json::array();
    for (auto& c : eng.clients) {
        nlohmann::json cj;
        cj["id"] = c.id;
        cj["g_head"] = segment_to_json(c.seg[kGen][0]);
        cj["g_tail"] = segment_to_json(c.seg[kGen][1]);
        cj["d_head"] = segment_to_json(c.seg[kDisc][0]);
        cj["d_tail"] = segment_to_json(c.seg[kDisc][1]);
        clients.push_back(std::move(cj));
    }
    j["clients"] = std::move(clients);
    j["g_server"] = segment_to_json(eng.server_seg[kGen]);
    j["d_server"] = segment_to_json(eng.server_seg[kDisc]);
    return j;
}

inline void engine_state_from_json(const nlohmann::json& j, SplitEngine& eng) {
    const auto& clients = j.at("clients");
    if (clients.size() != eng.clients.size())
        throw ConfigError("model state: client count mismatch");
    for (size_t k = 0; k < eng.clients.size(); ++k) {
        segment_from_json(clients.at(k).at("g_head"), eng.clients[k].seg[kGen][0]);
        segment_from_json(clients.at(k).at("g_tail"), eng.clients[k].seg[kGen][1]);
        segment_from_json(clients.at(k).at("d_head"), eng.clients[k].seg[kDisc][0]);
        segment_from_json(clients.at(k).at("d_tail"), eng.clients[k].seg[kDisc][1]);
    }
    segment_from_json(j.at("g_server"), eng.server_seg[kGen]);
    segment_from_json(j.at("d_server"), eng.server_seg[kDisc]);
}

// ---------------------------------------------------------------------------
// Manifest (written last; every referenced artifact must exist)

struct RunManifest {
    nlohmann::json config_snapshot;
    uint64_t seed = 0;
    std::vector<std::string> artifacts;  // paths relative to the run dir
    std::string started_at, finished_at;
    std::string failed_stage;  // empty on success
    std::string error;
};

inline void write_manifest(const std::filesystem::path& dir, const RunManifest& m) {
    nlohmann::json j;
    j["seed"] = m.seed;
    j["config"] = m.config_snapshot;
    j["artifacts"] = m.artifacts;
    j["started_at"] = m.started_at;
    j["finished_at"] = m.finished_at;
    j["csv_schema_version"] = kCsvSchemaVersion;
    j["module_versions"] = module_versions();
    if (!m.failed_stage.empty()) {
        j["failed_stage"] = m.failed_stage;
        j["error"] = m.error;
    }
    if (m.failed_stage.empty())
        for (const auto& a : m.artifacts)
            if (!std::filesystem::exists(dir / a))
                throw InvariantError("manifest references missing artifact " + a);
    write_json((dir / "manifest.json").string(), j);
}

}  // namespace splitgan
