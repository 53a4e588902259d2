include('forge.py')

method = 'sqft_qa_sparsepeft'
quant = dict(quant, group_size=16)
search = dict(search, turns=20, neighbors=16)
