int i, j;
char str[50];
int main(){
    scanf("%s", str);
    for(i = 0; i < strlen(str); i++)
        printf("%c", str[strlen(str) - i - 1]);
    printf("\n");
    return 0;
}
