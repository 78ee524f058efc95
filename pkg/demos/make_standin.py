from plntree.hierarchy import TreeLayout, save_tree, write_leaf_csv
from plntree import baselines as bl
tree = TreeLayout([3, 6, 10, 16], [[0, 0, 1, 1, 2, 2], [0, 0, 1, 2, 2, 3, 4, 4, 5, 5],
                                   [0, 0, 1, 1, 2, 3, 3, 4, 5, 5, 6, 6, 7, 8, 8, 9]])
cfg = bl.MarkovDirichletConfig(tree, effort="negative-binomial", nb_r=5.0, nb_p=5.0 / (5.0 + 20000.0), net_seed=11)
data = bl.markov_dirichlet_sample(cfg, 100, 2024)
data.sample_ids = [f"S{i:03d}" for i in range(100)]
save_tree(tree, "src/plntree/data/standin_tree.json")
write_leaf_csv(data, "src/plntree/data/standin_leaves.csv")
print(data.leaves.sum(1)[:10])
