#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace rgbdf {

/// Base of every error thrown by the library. `category()` is the short tag
/// the CLI prints in front of the message.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

class InvalidArgument : public Error {
 public:
  explicit InvalidArgument(const std::string& what) : Error("invalid-argument", what) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error("index", what) {}
};

/// Malformed file contents. `offset()` is the byte offset where parsing failed.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error("format", what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

/// Data that parses fine but disagrees with its manifest, config or checkpoint.
class IntegrityError : public Error {
 public:
  explicit IntegrityError(const std::string& what) : Error("integrity", what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io", what) {}
};

/// A non-finite value appeared during reverse diffusion.
class DivergedSampling : public Error {
 public:
  explicit DivergedSampling(int step)
      : Error("diverged-sampling", "non-finite value at reverse step t=" + std::to_string(step)),
        step_(step) {}

  int step() const noexcept { return step_; }

 private:
  int step_;
};

/// Training produced a non-finite loss; `last_checkpoint()` may be empty.
class DivergedTraining : public Error {
 public:
  DivergedTraining(long step, std::string last_checkpoint)
      : Error("diverged-training",
              "non-finite loss at step " + std::to_string(step) + "; last good checkpoint: " +
                  (last_checkpoint.empty() ? std::string("<none>") : last_checkpoint)),
        step_(step),
        last_checkpoint_(std::move(last_checkpoint)) {}

  long step() const noexcept { return step_; }
  const std::string& last_checkpoint() const noexcept { return last_checkpoint_; }

 private:
  long step_;
  std::string last_checkpoint_;
};

}  // namespace rgbdf
