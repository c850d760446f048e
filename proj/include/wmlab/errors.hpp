#pragma once

#include <stdexcept>
#include <string>

namespace wmlab {

// Malformed files: checkpoints, IDX archives, trigger containers.
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite loss or parameters. Training loops rethrow with phase/epoch/step
// context attached.
struct DivergedError : std::runtime_error {
    explicit DivergedError(const std::string& msg) : std::runtime_error(msg) {}
    DivergedError(const std::string& phase, int epoch, int step, const std::string& msg)
        : std::runtime_error("training diverged in phase '" + phase + "' at epoch " +
                             std::to_string(epoch) + ", step " + std::to_string(step) + ": " + msg),
          phase(phase), epoch(epoch), step(step) {}
    std::string phase;
    int epoch = -1;
    int step = -1;
};

}  // namespace wmlab
