#pragma once

#include "eeg4d/binary_io.hpp"
#include "eeg4d/diff/gradcheck.hpp"
#include "eeg4d/diff/ops.hpp"
#include "eeg4d/diff/params.hpp"
#include "eeg4d/diff/tensor.hpp"
#include "eeg4d/explain.hpp"
#include "eeg4d/layout.hpp"
#include "eeg4d/model.hpp"
#include "eeg4d/repr4d.hpp"
#include "eeg4d/sample_io.hpp"
#include "eeg4d/sigproc.hpp"
#include "eeg4d/synth.hpp"
#include "eeg4d/train.hpp"
