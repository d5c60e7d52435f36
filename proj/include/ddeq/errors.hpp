#pragma once

#include <stdexcept>
#include <string>

namespace ddeq {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

#define DDEQ_DEFINE_ERROR(Name)                    \
  struct Name : Error {                            \
    explicit Name(const std::string& msg)          \
        : Error(std::string(#Name ": ") + msg) {}  \
  }

// measure
DDEQ_DEFINE_ERROR(DegenerateSpread);
DDEQ_DEFINE_ERROR(EmptyPartial);
DDEQ_DEFINE_ERROR(DimensionMismatch);
DDEQ_DEFINE_ERROR(ParseError);
DDEQ_DEFINE_ERROR(SchemaError);
// autodiff / net
DDEQ_DEFINE_ERROR(ShapeError);
DDEQ_DEFINE_ERROR(NotScalarOutput);
DDEQ_DEFINE_ERROR(AllSourcesMasked);
DDEQ_DEFINE_ERROR(AllMasked);
DDEQ_DEFINE_ERROR(OddLatentDim);
// solver / train
DDEQ_DEFINE_ERROR(NonFiniteGradient);
// diagnostics
DDEQ_DEFINE_ERROR(AllTermsSkipped);
DDEQ_DEFINE_ERROR(UnsupportedScale);
// config / cli
DDEQ_DEFINE_ERROR(ConfigError);

#undef DDEQ_DEFINE_ERROR

}  // namespace ddeq
