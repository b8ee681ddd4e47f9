#ifndef MCLAB_MCLAB_HPP
#define MCLAB_MCLAB_HPP

#include "mclab/common.hpp"
#include "mclab/corpus.hpp"
#include "mclab/evaluation.hpp"
#include "mclab/features.hpp"
#include "mclab/imaging.hpp"
#include "mclab/models.hpp"
#include "mclab/opcodes.hpp"
#include "mclab/ops.hpp"
#include "mclab/rng.hpp"
#include "mclab/tensor.hpp"
#include "mclab/training.hpp"

#endif  // MCLAB_MCLAB_HPP
