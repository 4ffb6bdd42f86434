# %% [markdown]
# # Turning backward motion into a forward estimate
#
# Under constant velocity the forward motion is the negated backward motion.
# That baseline is exact for lateral motion and breaks under acceleration,
# where a small learned network does better.

# %%
from dtf import synth
from dtf.inversion import constant_linear_invert
from dtf.training import TrainSchedule, evaluate_inverter, train_inverter

const = synth.generate_dataset(10, 0, "constant")
print("constant velocity, baseline OF %:", evaluate_inverter(None, const, inverter=constant_linear_invert).rate("OF"))

train = synth.generate_dataset(60, 0, "accelerated")
held = synth.generate_dataset(20, 9000, "accelerated")
base = evaluate_inverter(None, held, inverter=constant_linear_invert).rate("OF")

# %% [markdown]
# A short training run; the acceptance suite uses 200 samples and 20 epochs.

# %%
net = train_inverter(train, TrainSchedule(8, 4, ((0, 1e-3), (6, 3e-4))))
print(f"accelerated: baseline OF {base:.2f} %, learned OF {evaluate_inverter(net, held).rate('OF'):.2f} %")
