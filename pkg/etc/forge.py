# Defaults for bin/forge.py; every key is optional.

method = 'sqft_sparsepeft'
sparsity = 0.5
score = 'wanda'
group = 'row'
calibration = 128
ranks = (16, 12, 8)
alpha = 64.0
rescale = 'active'
seed = 0

quant = dict(method='gptq_lite', bits=4, group_size=None, range_mode='half')
train = dict(epochs=20, batch_size=32, learning_rate=1e-3, optimizer='adam')
task = dict(kind='regression', in_dim=64, hidden=(64,), train_size=4096)
search = dict(turns=10, neighbors=8, step=1, eval_samples=256)
