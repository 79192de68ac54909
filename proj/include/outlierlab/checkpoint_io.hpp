#pragma once

#include <stdexcept>
#include <string>

#include "outlierlab/train.hpp"

namespace outlierlab {

// Checkpoint file: text header (version line, configs, step, tensor manifest
// with name/shape/byte offset) terminated by a blank line, then raw
// little-endian float32 payload in manifest order.
class CheckpointError : public std::runtime_error {
public:
    enum class Kind { CorruptHeader, ShapeMismatch, TruncatedPayload };

    CheckpointError(Kind kind, const std::string& what)
        : std::runtime_error(what), kind_(kind) {}
    Kind kind() const { return kind_; }

private:
    Kind kind_;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace outlierlab
