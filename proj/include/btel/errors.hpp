// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace btel {

// Base class for all library errors.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define BTEL_DEFINE_ERROR(NAME)                                  \
  struct NAME : Error {                                          \
    explicit NAME(const std::string& msg) : Error(#NAME ": " + msg) {} \
  }

// corpus
BTEL_DEFINE_ERROR(InvalidSpec);
BTEL_DEFINE_ERROR(UnknownWord);
BTEL_DEFINE_ERROR(IoError);
BTEL_DEFINE_ERROR(EncodingError);

// model
BTEL_DEFINE_ERROR(InvalidConfig);
BTEL_DEFINE_ERROR(ContextOverflow);
BTEL_DEFINE_ERROR(EmptyLossMask);
BTEL_DEFINE_ERROR(ShapeMismatch);
BTEL_DEFINE_ERROR(NonFiniteGradient);
BTEL_DEFINE_ERROR(FormatVersionMismatch);
BTEL_DEFINE_ERROR(VocabHashMismatch);

// decoding
BTEL_DEFINE_ERROR(UnknownLanguage);
BTEL_DEFINE_ERROR(EmptyEnsemble);

// diagnostics
BTEL_DEFINE_ERROR(EmptyInput);
BTEL_DEFINE_ERROR(InsufficientSamples);
BTEL_DEFINE_ERROR(NotApplicable);

// eval
BTEL_DEFINE_ERROR(LengthMismatch);
BTEL_DEFINE_ERROR(EmptyCorpus);
BTEL_DEFINE_ERROR(EmptyEvalSet);
BTEL_DEFINE_ERROR(DegenerateVariance);
BTEL_DEFINE_ERROR(InsufficientData);

// training
BTEL_DEFINE_ERROR(EmptyDataset);

// cli
BTEL_DEFINE_ERROR(ConfigError);

#undef BTEL_DEFINE_ERROR

}  // namespace btel
