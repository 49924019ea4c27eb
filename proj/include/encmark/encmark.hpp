// Umbrella header: the whole workbench in one include.
#pragma once

#include "encmark/core.hpp"
#include "encmark/layers.hpp"
#include "encmark/nets.hpp"
#include "encmark/data.hpp"
#include "encmark/augment.hpp"
#include "encmark/ssl.hpp"
#include "encmark/eval.hpp"
#include "encmark/wm.hpp"
#include "encmark/embed.hpp"
#include "encmark/steal.hpp"
#include "encmark/removal.hpp"
#include "encmark/trials.hpp"
#include "encmark/checkpoint.hpp"
#include "encmark/pipeline.hpp"
#include "encmark/reproduce.hpp"
