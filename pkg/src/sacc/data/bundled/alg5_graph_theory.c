int l[8][8];
int n, m, i, j, k, c;
void dfs(int s,int d,int M[]){
    int L[8], x;
    for(x = 0; x < n; x++) L[x] = M[x];
    for(x = 0; x < n; x++){
        if(L[x] && l[s][x]){
            if(d != n - 1) {L[x] = 0;dfs(x, d + 1, L); L[x] = 1;}
            else c++;
        }
    }
}
int main(){
    int M[8];
    scanf("%d%d", &n, &m);
    for(i = 0; i < n; i++)
        for(j = 0; j < n; j++) {M[i] = 1; l[i][j] = 0;}
    M[0] = 0;
    for(i = 0; i < m; i++){
        scanf("%d%d", &j, &k);
        l[j - 1][k - 1] = l[k - 1][j - 1] = 1;
    }
    dfs(0, 1, M);
    printf("%d", c);
}
