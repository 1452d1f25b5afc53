#pragma once
#include <map>
#include <string>

namespace splitgan {

constexpr const char* kProjectVersion = "0.1.0";
constexpr int kCsvSchemaVersion = 1;

inline std::map<std::string, std::string> module_versions() {
    return {
        {"model-graph", "0.1.0"},    {"latency-model", "0.1.0"},
        {"cut-optimizer", "0.1.0"},  {"split-engine", "0.1.0"},
        {"cluster-aggregator", "0.1.0"}, {"data-hub", "0.1.0"},
        {"eval-metrics", "0.1.0"},   {"training-orchestrator", "0.1.0"},
        {"cli-runner", "0.1.0"},
    };
}

}  // namespace splitgan
