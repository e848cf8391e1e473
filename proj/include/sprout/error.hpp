#pragma once

#include <stdexcept>
#include <string>

namespace sprout {

// Every failure carries a short machine-readable category; the CLI prints
// `error: <category>: <detail>`.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& detail)
      : std::runtime_error(detail), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

#define SPROUT_DEFINE_ERROR(Name, tag)                                     \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& detail) : Error(tag, detail) {}       \
  };

SPROUT_DEFINE_ERROR(ConfigError, "config")
SPROUT_DEFINE_ERROR(ArgumentError, "argument")
SPROUT_DEFINE_ERROR(ShapeError, "shape")
SPROUT_DEFINE_ERROR(NumericError, "numeric")
SPROUT_DEFINE_ERROR(SingularityError, "singularity")
SPROUT_DEFINE_ERROR(DegenerateInputError, "degenerate-input")
SPROUT_DEFINE_ERROR(FormatError, "format")
SPROUT_DEFINE_ERROR(IngestError, "ingest")
SPROUT_DEFINE_ERROR(PersistError, "persist")
SPROUT_DEFINE_ERROR(LabelError, "label")

#undef SPROUT_DEFINE_ERROR

}  // namespace sprout
